from __future__ import annotations

import json
import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cropanomaly.geo_raster import (
    BandGrid,
    BandRole,
    GridAlignmentError,
    GridFormatError,
    GridMeta,
    ParcelPolygon,
    PixelSet,
    PolygonError,
    apply_quality_masks,
    erode_pixels,
    load_band_grid,
    rasterize_polygon,
    read_grid_file,
    read_parcels,
    resample_to_10m,
    save_band_grid,
    write_grid_file,
    write_parcels,
)

D0 = date(2018, 3, 1)


def square(x0, y0, side, pid="p"):
    return ParcelPolygon(pid, [[(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]])


def meta(w=20, h=20, ps=10.0, ox=0.0, oy=200.0):
    return GridMeta(w, h, ps, ox, oy)


# --------------------------------------------------------------------------
# grid file format


def test_grid_roundtrip_row_major(tmp_path):
    m = GridMeta(2, 2, 10.0, 0.0, 20.0)
    path = write_grid_file(tmp_path / "a", m, "NIR", D0, np.array([0.1, 0.2, 0.3, 0.4]))
    g = load_band_grid(path)
    assert g.band_role is BandRole.NIR
    assert g.date == D0
    np.testing.assert_array_equal(g.values, np.array([[0.1, 0.2], [0.3, 0.4]], dtype=np.float32))


def test_grid_header_keys(tmp_path):
    m = GridMeta(3, 2, 20.0, 5.0, 40.0)
    write_grid_file(tmp_path / "b", m, "RED", D0, np.zeros(6))
    hdr = json.loads((tmp_path / "b.hdr.json").read_text())
    assert {"width", "height", "pixel_size_m", "origin_x", "origin_y", "band_role", "date", "nodata"} <= set(hdr)
    assert hdr["date"] == "2018-03-01"


def test_grid_payload_length_mismatch(tmp_path):
    m = GridMeta(2, 2, 10.0, 0.0, 20.0)
    write_grid_file(tmp_path / "c", m, "NIR", D0, np.zeros(4))
    (tmp_path / "c.grid").write_bytes(np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(GridFormatError):
        read_grid_file(tmp_path / "c.grid")


def test_grid_rejects_wrong_value_count():
    with pytest.raises(GridFormatError):
        BandGrid(GridMeta(2, 2, 10.0, 0, 20), D0, "NIR", np.zeros(3))


def test_grid_unknown_role(tmp_path):
    write_grid_file(tmp_path / "d", GridMeta(1, 1, 10.0, 0, 10), "BOGUS", D0, np.zeros(1))
    with pytest.raises(GridFormatError):
        load_band_grid(tmp_path / "d.grid")


def test_grid_roundtrip_random_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        h, w = rng.integers(1, 12, size=2)
        vals = rng.standard_normal((h, w)).astype(np.float32) * 10.0 ** rng.integers(-5, 5)
        g = BandGrid(GridMeta(int(w), int(h), 10.0, 0.0, 100.0), D0, "SWIR", vals)
        back = load_band_grid(save_band_grid(tmp_path / f"g{i}", g))
        assert back.values.tobytes() == g.values.tobytes()
        assert back.meta == g.meta


# --------------------------------------------------------------------------
# resampling


def test_resample_single_pixel():
    g = BandGrid(GridMeta(1, 1, 20.0, 0.0, 20.0), D0, "SWIR", [7.0])
    out = resample_to_10m(g)
    assert out.meta.pixel_size == 10.0
    np.testing.assert_array_equal(out.values, np.full((2, 2), 7.0, dtype=np.float32))


def test_resample_nodata_propagates():
    m = GridMeta(1, 1, 20.0, 0.0, 20.0)
    out = resample_to_10m(BandGrid(m, D0, "SWIR", [m.nodata]))
    assert np.all(out.meta.is_nodata(out.values))


def test_resample_index_arithmetic():
    vals = np.arange(4, dtype=np.float32).reshape(2, 2)
    out = resample_to_10m(BandGrid(GridMeta(2, 2, 20.0, 0.0, 40.0), D0, "RE", vals)).values
    assert out.shape == (4, 4)
    for r in range(4):
        for c in range(4):
            assert out[r, c] == vals[r // 2, c // 2]


def test_resample_rejects_10m_input():
    with pytest.raises(GridAlignmentError):
        resample_to_10m(BandGrid(GridMeta(2, 2, 10.0, 0.0, 20.0), D0, "RE", np.zeros(4)))


# --------------------------------------------------------------------------
# rasterization


def test_rasterize_single_pixel():
    m = meta()
    ps = rasterize_polygon(square(0, 190, 10), m)
    assert ps.survived_indices() == {(0, 0)}


def test_rasterize_three_by_three():
    ps = rasterize_polygon(square(30, 150, 30), meta())
    assert len(ps) == 9
    assert ps.survived_indices() == {(r, c) for r in range(2, 5) for c in range(3, 6)}


def test_rasterize_hole_excluded():
    outer = [(0, 150), (50, 150), (50, 200), (0, 200)]
    hole = [(20, 170), (30, 170), (30, 180), (20, 180)]
    ps = rasterize_polygon(ParcelPolygon("h", [outer, hole]), meta())
    assert len(ps) == 24
    assert (2, 2) not in ps.survived_indices()


def test_rasterize_degenerate_polygon():
    with pytest.raises(PolygonError):
        rasterize_polygon(ParcelPolygon("z", [[(0, 0), (10, 0), (20, 0)]]), meta())


def test_rasterize_outside_grid():
    with pytest.raises(PolygonError):
        rasterize_polygon(square(1000, 1000, 10), meta())


def test_rasterize_area_converges():
    rng = np.random.default_rng(3)
    m = GridMeta(400, 400, 1.0, 0.0, 400.0)
    for _ in range(10):
        k = int(rng.integers(3, 9))
        ang = np.sort(rng.uniform(0, 2 * math.pi, k))
        radius = rng.uniform(60, 150)
        ring = [(200 + radius * math.cos(a), 200 + radius * math.sin(a)) for a in ang]
        poly = ParcelPolygon("r", [ring])
        if poly.area < 10_000:
            continue
        ps = rasterize_polygon(poly, m)
        assert abs(len(ps) * m.pixel_area - poly.area) / poly.area < 0.05


@given(
    dx=st.integers(-5, 5),
    dy=st.integers(-5, 5),
    x0=st.floats(20, 80),
    y0=st.floats(20, 80),
    side=st.floats(5, 60),
)
def test_rasterize_translation_equivariant(dx, dy, x0, y0, side):
    base = GridMeta(20, 20, 10.0, 0.0, 200.0)
    shifted = GridMeta(20, 20, 10.0, dx * 10.0, 200.0 + dy * 10.0)
    poly = square(x0, y0, side)
    a = rasterize_polygon(poly, base)
    b = rasterize_polygon(poly.translated(dx * 10.0, dy * 10.0), shifted)
    assert a.survived_indices() == b.survived_indices()


# --------------------------------------------------------------------------
# erosion


def block(r0, c0, h, w, m=None):
    m = m or meta()
    return PixelSet.from_indices("b", m, [(r, c) for r in range(r0, r0 + h) for c in range(c0, c0 + w)])


def test_erode_three_by_three_to_center():
    assert erode_pixels(block(5, 5, 3, 3), 10.0).survived_indices() == {(6, 6)}


def test_erode_two_by_two_empty():
    assert erode_pixels(block(5, 5, 2, 2), 10.0).survived_indices() == set()


def test_erode_radius_zero_identity():
    ps = block(2, 3, 4, 5)
    assert erode_pixels(ps, 0.0).survived_indices() == ps.survived_indices()


def test_erode_negative_radius():
    with pytest.raises(ValueError):
        erode_pixels(block(0, 0, 2, 2), -1.0)


pixel_sets = st.sets(st.tuples(st.integers(0, 14), st.integers(0, 14)), max_size=120)


@given(cells=pixel_sets, r1=st.floats(0, 35), r2=st.floats(0, 35))
def test_erode_antiextensive_and_monotone(cells, r1, r2):
    ps = PixelSet.from_indices("x", meta(15, 15), cells)
    lo, hi = sorted((r1, r2))
    a = erode_pixels(ps, lo).survived_indices()
    b = erode_pixels(ps, hi).survived_indices()
    assert a <= set(cells)
    assert b <= a
    assert erode_pixels(ps, 0.0).survived_indices() == set(cells)


# --------------------------------------------------------------------------
# quality masks


def mask(m, vals, role):
    return BandGrid(m, D0, role, np.asarray(vals, dtype=np.float32))


def test_masks_all_clear_identity():
    m = meta(4, 4)
    ps = block(0, 0, 2, 2, m)
    out = apply_quality_masks(ps, mask(m, np.zeros(16), "CLOUD_MASK"), mask(m, np.zeros(16), "SHADOW_MASK"))
    assert out.clear_indices(D0) == ps.survived_indices()


def test_masks_all_cloudy_empty():
    m = meta(4, 4)
    ps = block(0, 0, 2, 2, m)
    out = apply_quality_masks(ps, mask(m, np.ones(16), "CLOUD_MASK"), mask(m, np.zeros(16), "SHADOW_MASK"))
    assert out.clear_indices(D0) == set()


def test_masks_tally():
    m = meta(4, 4)
    ps = block(0, 0, 2, 2, m)
    cloud = np.zeros((4, 4))
    shadow = np.zeros((4, 4))
    cloud[0, 0] = 1
    shadow[1, 1] = 1
    out = apply_quality_masks(ps, mask(m, cloud, "CLOUD_MASK"), mask(m, shadow, "SHADOW_MASK"))
    assert out.clear_indices(D0) == {(0, 1), (1, 0)}
    assert out.removed[D0] == {"cloud": 1, "shadow": 1}


@given(
    c1=st.lists(st.booleans(), min_size=25, max_size=25),
    c2=st.lists(st.booleans(), min_size=25, max_size=25),
)
def test_masks_two_dates_commute(c1, c2):
    m = meta(5, 5)
    ps = block(0, 0, 5, 5, m)
    zero = np.zeros(25)
    d1, d2 = date(2018, 1, 1), date(2018, 2, 1)
    g1 = BandGrid(m, d1, "CLOUD_MASK", np.array(c1, dtype=float))
    g2 = BandGrid(m, d2, "CLOUD_MASK", np.array(c2, dtype=float))
    s1 = BandGrid(m, d1, "SHADOW_MASK", zero)
    s2 = BandGrid(m, d2, "SHADOW_MASK", zero)
    ab = apply_quality_masks(apply_quality_masks(ps, g1, s1), g2, s2)
    ba = apply_quality_masks(apply_quality_masks(ps, g2, s2), g1, s1)
    for d in (d1, d2):
        assert ab.clear_indices(d) == ba.clear_indices(d)


def test_masks_require_alignment():
    m = meta(4, 4)
    other = GridMeta(4, 4, 10.0, 5.0, 200.0)
    ps = block(0, 0, 2, 2, m)
    with pytest.raises(GridAlignmentError):
        apply_quality_masks(ps, mask(other, np.zeros(16), "CLOUD_MASK"), mask(m, np.zeros(16), "SHADOW_MASK"))


# --------------------------------------------------------------------------
# GeoJSON


def test_parcels_roundtrip(tmp_path):
    polys = [square(0, 0, 10, "a"), ParcelPolygon("b", [[(0, 0), (5, 0), (5, 5)]], "wheat", "LATE_GROWTH")]
    write_parcels(tmp_path / "p.geojson", polys)
    back = read_parcels(tmp_path / "p.geojson")
    assert [p.id for p in back] == ["a", "b"]
    assert back[1].crop_type == "wheat"
    assert back[1].label == "LATE_GROWTH"
    np.testing.assert_allclose(back[0].exterior, polys[0].exterior)
