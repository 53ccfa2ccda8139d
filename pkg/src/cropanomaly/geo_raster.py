"""
Raster and vector ingestion for parcel analysis.

Grids are stored as a raw little-endian float32 payload (``<name>.grid``)
next to a JSON sidecar (``<name>.hdr.json``).  Parcels come in as GeoJSON
polygons expressed in the same planar metric frame as the grids.

Pixel ``(row, col)`` covers the square whose top-left corner sits at
``(origin_x + col * pixel_size, origin_y - row * pixel_size)``; rows grow
southwards.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BandRole",
    "BandGrid",
    "GridMeta",
    "GridFormatError",
    "GridAlignmentError",
    "ParcelPolygon",
    "PixelSet",
    "PolygonError",
    "apply_quality_masks",
    "erode_pixels",
    "load_band_grid",
    "polygon_within_grid",
    "rasterize_polygon",
    "read_grid_file",
    "read_parcels",
    "resample_to_10m",
    "save_band_grid",
    "write_grid_file",
    "write_parcels",
]

DEFAULT_NODATA = -9999.0


class GridFormatError(ValueError):
    """A grid file or its header is missing, malformed or inconsistent."""


class GridAlignmentError(ValueError):
    """Two grids that must share pixel geometry do not."""


class PolygonError(ValueError):
    """A parcel polygon is degenerate or invalid."""


class BandRole(str, enum.Enum):
    GREEN = "GREEN"
    RED = "RED"
    RE = "RE"
    NIR = "NIR"
    SWIR = "SWIR"
    VH = "VH"
    VV = "VV"
    CLOUD_MASK = "CLOUD_MASK"
    SHADOW_MASK = "SHADOW_MASK"

    @property
    def is_mask(self) -> bool:
        return self in (BandRole.CLOUD_MASK, BandRole.SHADOW_MASK)

    @property
    def is_sar(self) -> bool:
        return self in (BandRole.VH, BandRole.VV)


@dataclass(frozen=True)
class GridMeta:
    width: int
    height: int
    pixel_size: float
    origin_x: float
    origin_y: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GridFormatError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if not self.pixel_size > 0:
            raise GridFormatError(f"pixel size must be positive, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pixel_area(self) -> float:
        return self.pixel_size * self.pixel_size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the grid extent."""
        return (
            self.origin_x,
            self.origin_y - self.height * self.pixel_size,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y,
        )

    def aligned_with(self, other: GridMeta) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.pixel_size == other.pixel_size
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
        )

    def pixel_centers(self, rows, cols) -> tuple[np.ndarray, np.ndarray]:
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        x = self.origin_x + (cols + 0.5) * self.pixel_size
        y = self.origin_y - (rows + 0.5) * self.pixel_size
        return x, y

    def is_nodata(self, values: np.ndarray) -> np.ndarray:
        if math.isnan(self.nodata):
            return np.isnan(values)
        return (values == np.float32(self.nodata)) | np.isnan(values)


def require_aligned(*metas: GridMeta) -> None:
    first = metas[0]
    for other in metas[1:]:
        if not first.aligned_with(other):
            raise GridAlignmentError(f"grids are not aligned: {first} vs {other}")


@dataclass
class BandGrid:
    """One band (or quality mask) at one acquisition date.

    ``values`` has shape ``(height, width)`` and keeps the stored float32
    samples untouched, nodata sentinel included.
    """

    meta: GridMeta
    date: date
    band_role: BandRole
    values: np.ndarray

    def __post_init__(self):
        self.band_role = BandRole(self.band_role)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.size != self.meta.width * self.meta.height:
            raise GridFormatError(
                f"values length {self.values.size} != {self.meta.width}x{self.meta.height}"
            )
        self.values = self.values.reshape(self.meta.shape)

    def valid(self) -> np.ndarray:
        return ~self.meta.is_nodata(self.values)

    def as_float(self) -> np.ndarray:
        """Values as float64 with nodata replaced by NaN."""
        out = self.values.astype(np.float64)
        out[~self.valid()] = np.nan
        return out


# --------------------------------------------------------------------------
# grid file format


def _grid_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    if name.endswith(".hdr.json"):
        base = path.with_name(name[: -len(".hdr.json")])
    elif name.endswith(".grid"):
        base = path.with_name(name[: -len(".grid")])
    else:
        base = path
    return base.with_name(base.name + ".grid"), base.with_name(base.name + ".hdr.json")


def write_grid_file(path, meta: GridMeta, role: str, when: date, values: np.ndarray) -> Path:
    """Write a float32 payload and its header; returns the ``.grid`` path."""
    grid_path, hdr_path = _grid_paths(path)
    values = np.asarray(values, dtype="<f4")
    if values.size != meta.width * meta.height:
        raise GridFormatError("payload size does not match grid dimensions")
    header = {
        "width": meta.width,
        "height": meta.height,
        "pixel_size_m": meta.pixel_size,
        "origin_x": meta.origin_x,
        "origin_y": meta.origin_y,
        "band_role": str(role),
        "date": when.isoformat(),
        "nodata": None if math.isnan(meta.nodata) else meta.nodata,
    }
    grid_path.parent.mkdir(parents=True, exist_ok=True)
    grid_path.write_bytes(np.ascontiguousarray(values).tobytes(order="C"))
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return grid_path


def read_grid_file(path) -> tuple[GridMeta, str, date, np.ndarray]:
    """Read a grid without interpreting its role.

    Returns ``(meta, role_name, date, values)`` with values shaped
    ``(height, width)``.
    """
    grid_path, hdr_path = _grid_paths(path)
    if not hdr_path.exists():
        raise GridFormatError(f"missing header {hdr_path}")
    if not grid_path.exists():
        raise GridFormatError(f"missing payload {grid_path}")
    try:
        header = json.loads(hdr_path.read_text())
        nodata = header.get("nodata", DEFAULT_NODATA)
        meta = GridMeta(
            width=int(header["width"]),
            height=int(header["height"]),
            pixel_size=float(header["pixel_size_m"]),
            origin_x=float(header["origin_x"]),
            origin_y=float(header["origin_y"]),
            nodata=float("nan") if nodata is None else float(nodata),
        )
        role = str(header["band_role"])
        when = date.fromisoformat(header["date"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GridFormatError):
            raise
        raise GridFormatError(f"corrupt header {hdr_path}: {exc}") from exc
    raw = grid_path.read_bytes()
    expected = meta.width * meta.height * 4
    if len(raw) != expected:
        raise GridFormatError(
            f"payload length mismatch in {grid_path}: {len(raw)} bytes, expected {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(meta.shape)
    return meta, role, when, values


def load_band_grid(path) -> BandGrid:
    meta, role, when, values = read_grid_file(path)
    try:
        band_role = BandRole(role)
    except ValueError:
        raise GridFormatError(f"unknown band_role {role!r}") from None
    return BandGrid(meta, when, band_role, values)


def save_band_grid(path, grid: BandGrid) -> Path:
    return write_grid_file(path, grid.meta, grid.band_role.value, grid.date, grid.values)


# --------------------------------------------------------------------------
# resampling


def resample_to_10m(grid: BandGrid, reference: GridMeta | None = None) -> BandGrid:
    """Nearest-neighbour upsampling of a 20 m grid onto the 10 m lattice.

    Every 20 m pixel becomes a 2x2 block, nodata included.  When a 10 m
    ``reference`` is given the output is cropped to it; its origin must
    coincide with the source origin.
    """
    meta = grid.meta
    if meta.pixel_size != 20:
        raise GridAlignmentError(f"expected a 20 m grid, got {meta.pixel_size} m")
    values = np.repeat(np.repeat(grid.values, 2, axis=0), 2, axis=1)
    out_meta = GridMeta(meta.width * 2, meta.height * 2, 10.0, meta.origin_x, meta.origin_y, meta.nodata)
    if reference is not None:
        if reference.pixel_size != 10 or (reference.origin_x, reference.origin_y) != (
            meta.origin_x,
            meta.origin_y,
        ):
            raise GridAlignmentError("20 m grid origin does not align with the 10 m reference")
        if reference.width > out_meta.width or reference.height > out_meta.height:
            raise GridAlignmentError("10 m reference extends past the resampled grid")
        values = values[: reference.height, : reference.width]
        out_meta = replace(reference, nodata=meta.nodata)
    return BandGrid(out_meta, grid.date, grid.band_role, values)


# --------------------------------------------------------------------------
# polygons


def _close_ring(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
        raise PolygonError("a ring needs at least three (x, y) vertices")
    if not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    return ring


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:-1, 0], ring[:-1, 1]
    x1, y1 = ring[1:, 0], ring[1:, 1]
    return 0.5 * float(np.sum(x * y1 - x1 * y))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(p1, p2, q1, q2) -> bool:
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4):
        return True

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    if d1 == 0 and on_segment(q1, q2, p1):
        return True
    if d2 == 0 and on_segment(q1, q2, p2):
        return True
    if d3 == 0 and on_segment(p1, p2, q1):
        return True
    if d4 == 0 and on_segment(p1, p2, q2):
        return True
    return False


def _ring_self_intersects(ring: np.ndarray) -> bool:
    n = len(ring) - 1
    for i in range(n):
        for j in range(i + 1, n):
            # adjacent edges share a vertex by construction
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return True
    return False


@dataclass
class ParcelPolygon:
    """A parcel outline: exterior ring first, optional holes after it."""

    id: str
    rings: list
    crop_type: str = ""
    label: str | None = None

    def __post_init__(self):
        self.id = str(self.id)
        if not self.rings:
            raise PolygonError(f"parcel {self.id}: no rings")
        self.rings = [_close_ring(r) for r in self.rings]

    @property
    def exterior(self) -> np.ndarray:
        return self.rings[0]

    @property
    def area(self) -> float:
        total = abs(_ring_area(self.rings[0]))
        for hole in self.rings[1:]:
            total -= abs(_ring_area(hole))
        return total

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        ext = self.exterior
        return float(ext[:, 0].min()), float(ext[:, 1].min()), float(ext[:, 0].max()), float(ext[:, 1].max())

    def validate(self) -> None:
        if self.area <= 0:
            raise PolygonError(f"parcel {self.id}: degenerate polygon (area 0)")
        if _ring_self_intersects(self.exterior):
            raise PolygonError(f"parcel {self.id}: exterior ring self-intersects")

    def translated(self, dx: float, dy: float) -> ParcelPolygon:
        return ParcelPolygon(self.id, [r + (dx, dy) for r in self.rings], self.crop_type, self.label)


def points_in_polygon(x: np.ndarray, y: np.ndarray, rings: Sequence[np.ndarray]) -> np.ndarray:
    """Even-odd membership of points against all rings (holes toggle out)."""
    inside = np.zeros(np.shape(x), dtype=bool)
    for ring in rings:
        x0, y0 = ring[:-1, 0], ring[:-1, 1]
        x1, y1 = ring[1:, 0], ring[1:, 1]
        for xa, ya, xb, yb in zip(x0, y0, x1, y1):
            if ya == yb:
                continue
            straddles = (ya > y) != (yb > y)
            x_cross = xa + (y - ya) * (xb - xa) / (yb - ya)
            inside ^= straddles & (x < x_cross)
    return inside


def polygon_within_grid(polygon: ParcelPolygon, meta: GridMeta) -> bool:
    xmin, ymin, xmax, ymax = polygon.bounds
    gx0, gy0, gx1, gy1 = meta.bounds
    return xmin >= gx0 and xmax <= gx1 and ymin >= gy0 and ymax <= gy1


# --------------------------------------------------------------------------
# pixel sets


@dataclass
class PixelSet:
    """Pixels of one parcel on one grid, with per-stage provenance flags.

    ``rows``/``cols`` list every pixel whose centre lies inside the polygon.
    ``survived`` flags those kept by the inward buffer and ``clear[d]``
    flags those also free of cloud and shadow at date ``d``.
    """

    parcel_id: str
    meta: GridMeta
    rows: np.ndarray
    cols: np.ndarray
    survived: np.ndarray = None
    clear: dict = field(default_factory=dict)
    removed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        if self.survived is None:
            self.survived = np.ones(len(self.rows), dtype=bool)
        if len(self.rows) and (
            self.rows.min() < 0
            or self.cols.min() < 0
            or self.rows.max() >= self.meta.height
            or self.cols.max() >= self.meta.width
        ):
            raise IndexError(f"pixel set {self.parcel_id} has indices outside the grid")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_survived(self) -> int:
        return int(self.survived.sum())

    def survived_indices(self) -> set[tuple[int, int]]:
        return set(zip(self.rows[self.survived].tolist(), self.cols[self.survived].tolist()))

    def clear_indices(self, when: date) -> set[tuple[int, int]]:
        m = self.clear[when]
        return set(zip(self.rows[m].tolist(), self.cols[m].tolist()))

    def flat_index(self, mask: np.ndarray | None = None) -> np.ndarray:
        rows, cols = (self.rows, self.cols) if mask is None else (self.rows[mask], self.cols[mask])
        return rows * self.meta.width + cols

    @classmethod
    def from_indices(cls, parcel_id: str, meta: GridMeta, indices: Iterable[tuple[int, int]]) -> PixelSet:
        idx = sorted(set(indices))
        rows = np.array([r for r, _ in idx], dtype=np.int64)
        cols = np.array([c for _, c in idx], dtype=np.int64)
        return cls(parcel_id, meta, rows, cols)


def rasterize_polygon(polygon: ParcelPolygon, meta: GridMeta) -> PixelSet:
    """Pixels whose centre falls inside the polygon (even-odd rule)."""
    if polygon.area <= 0:
        raise PolygonError(f"parcel {polygon.id}: degenerate polygon (area 0)")
    xmin, ymin, xmax, ymax = polygon.bounds
    gx0, gy0, gx1, gy1 = meta.bounds
    if xmax <= gx0 or xmin >= gx1 or ymax <= gy0 or ymin >= gy1:
        raise PolygonError(f"parcel {polygon.id}: polygon does not intersect the grid")
    ps = meta.pixel_size
    c0 = max(0, int(math.floor((xmin - meta.origin_x) / ps)))
    c1 = min(meta.width - 1, int(math.ceil((xmax - meta.origin_x) / ps)))
    r0 = max(0, int(math.floor((meta.origin_y - ymax) / ps)))
    r1 = min(meta.height - 1, int(math.ceil((meta.origin_y - ymin) / ps)))
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    rr, cc = rr.ravel(), cc.ravel()
    x, y = meta.pixel_centers(rr, cc)
    inside = points_in_polygon(x, y, polygon.rings)
    return PixelSet(polygon.id, meta, rr[inside], cc[inside])


def structuring_offsets(radius: float, pixel_size: float) -> list[tuple[int, int]]:
    """Neighbour offsets whose pixel square comes closer than ``radius``.

    The distance is measured from the centre pixel's centre to the nearest
    point of the neighbour's square, so a one-pixel radius covers the full
    3x3 neighbourhood (diagonals included).
    """
    r = radius / pixel_size
    reach = int(math.ceil(r))
    out = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            if dr == 0 and dc == 0:
                continue
            gap_r = max(abs(dr) - 0.5, 0.0)
            gap_c = max(abs(dc) - 0.5, 0.0)
            if math.hypot(gap_r, gap_c) < r:
                out.append((dr, dc))
    return out


def erode_pixels(pixels: PixelSet, radius: float, meta: GridMeta | None = None) -> PixelSet:
    """Inward buffer applied in raster space (morphological erosion).

    A pixel survives when every pixel within ``radius`` metres of its centre
    belongs to the current surviving set.
    """
    if radius < 0:
        raise ValueError("buffer radius must be non-negative")
    meta = pixels.meta if meta is None else meta
    offsets = structuring_offsets(radius, meta.pixel_size)
    survived = pixels.survived.copy()
    if offsets and survived.any():
        rows, cols = pixels.rows[survived], pixels.cols[survived]
        pad = max(max(abs(dr), abs(dc)) for dr, dc in offsets)
        r0, c0 = rows.min() - pad, cols.min() - pad
        h = rows.max() - r0 + pad + 1
        w = cols.max() - c0 + pad + 1
        img = np.zeros((h, w), dtype=bool)
        img[rows - r0, cols - c0] = True
        eroded = img.copy()
        for dr, dc in offsets:
            shifted = np.zeros_like(img)
            # shifted[r, c] = img[r + dr, c + dc]
            shifted[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)] = img[
                max(0, dr) : h - max(0, -dr), max(0, dc) : w - max(0, -dc)
            ]
            eroded &= shifted
        survived[survived] = eroded[rows - r0, cols - c0]
    clear = {d: m & survived for d, m in pixels.clear.items()}
    return replace(pixels, survived=survived, clear=clear, removed=dict(pixels.removed))


def apply_quality_masks(pixels: PixelSet, cloud: BandGrid, shadow: BandGrid, when: date | None = None) -> PixelSet:
    """Flag the surviving pixels that are cloud- and shadow-free at a date.

    Mask values other than 0 (including nodata) count as masked.  Removal
    counts are attributed to cloud first, then shadow.
    """
    require_aligned(pixels.meta, cloud.meta, shadow.meta)
    when = cloud.date if when is None else when
    cloudy = cloud.values[pixels.rows, pixels.cols] != 0
    shadowed = shadow.values[pixels.rows, pixels.cols] != 0
    base = pixels.survived
    clear = base & ~cloudy & ~shadowed
    out_clear = dict(pixels.clear)
    out_clear[when] = clear
    out_removed = dict(pixels.removed)
    out_removed[when] = {
        "cloud": int(np.sum(base & cloudy)),
        "shadow": int(np.sum(base & ~cloudy & shadowed)),
    }
    return replace(pixels, clear=out_clear, removed=out_removed)


# --------------------------------------------------------------------------
# GeoJSON


def read_parcels(path) -> list[ParcelPolygon]:
    data = json.loads(Path(path).read_text())
    if data.get("type") != "FeatureCollection":
        raise PolygonError("parcel file must be a GeoJSON FeatureCollection")
    parcels = []
    for feat in data.get("features", []):
        props = feat.get("properties") or {}
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise PolygonError(f"parcel {props.get('id')}: only Polygon geometries are supported")
        if "id" not in props:
            raise PolygonError("every feature needs an 'id' property")
        parcels.append(
            ParcelPolygon(
                id=str(props["id"]),
                rings=[np.asarray(r, dtype=float) for r in geom["coordinates"]],
                crop_type=str(props.get("crop_type", "")),
                label=props.get("label"),
            )
        )
    return parcels


def write_parcels(path, parcels: Iterable[ParcelPolygon]) -> Path:
    features = []
    for p in parcels:
        props = {"id": p.id, "crop_type": p.crop_type}
        if p.label is not None:
            props["label"] = p.label
        features.append(
            {
                "type": "Feature",
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in p.rings]},
            }
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")
    return path
