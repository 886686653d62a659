"""Unit tests for road mask rasterization, dilation and application."""

import math
from fractions import Fraction

import numpy as np
import pytest

from roadscope.config.settings import DilationConfig
from roadscope.core.exceptions import SizeMismatch
from roadscope.geo.coords import GeoTransform, LocalFrame, PixelCoord
from roadscope.ingest.models import RoadClass
from roadscope.masking.maskgen import (
    Mask,
    MaskMode,
    apply_mask,
    bresenham,
    clip_segment,
    dilate,
    load_mask_png,
    polyline_to_pixels,
    rasterize_segments,
    road_mask_for_tile,
    save_mask_png,
)


def reference_line(a, b):
    """Nearest pixel to the ideal line per major-axis step, ties to the lower index."""
    (x0, y0), (x1, y1) = a, b
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy))
    if n == 0:
        return {(x0, y0)}
    out = set()
    for k in range(n + 1):
        t = Fraction(k, n)
        if abs(dx) >= abs(dy):
            x, ideal = x0 + int(t * dx), y0 + t * dy
            out.add((x, math.ceil(ideal - Fraction(1, 2))))
        else:
            y, ideal = y0 + int(t * dy), x0 + t * dx
            out.add((math.ceil(ideal - Fraction(1, 2)), y))
    return out


class TestBresenham:
    """Integer line rasterization."""

    def test_examples(self):
        assert bresenham(PixelCoord(0, 0), PixelCoord(3, 0)) == [(0, 0), (1, 0), (2, 0), (3, 0)]
        assert bresenham(PixelCoord(0, 0), PixelCoord(2, 2)) == [(0, 0), (1, 1), (2, 2)]
        assert bresenham(PixelCoord(0, 0), PixelCoord(0, -2)) == [(0, 0), (0, -1), (0, -2)]
        assert bresenham(PixelCoord(4, 4), PixelCoord(4, 4)) == [(4, 4)]

    @pytest.mark.property
    def test_matches_reference_in_all_octants(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = PixelCoord(*(int(v) for v in rng.integers(-50, 50, size=2)))
            b = PixelCoord(*(int(v) for v in rng.integers(-50, 50, size=2)))
            chain = bresenham(a, b)

            assert chain[0] == a and chain[-1] == b
            assert set(chain) == reference_line(a, b)
            assert len(chain) == max(abs(b.col - a.col), abs(b.row - a.row)) + 1
            for p, q in zip(chain, chain[1:]):
                assert max(abs(p.col - q.col), abs(p.row - q.row)) == 1
            assert set(bresenham(b, a)) == set(chain)


def test_clip_segment():
    """Test Cohen-Sutherland clipping to the tile."""
    assert clip_segment((2, 3), (5, 6), 10) == ((2, 3), (5, 6))
    assert clip_segment((-5, 4), (15, 4), 10) == ((0, 4), (9, 4))
    assert clip_segment((-5, -5), (-1, 20), 10) is None
    assert clip_segment((-10, 0), (0, -10), 10) is None

    a, b = clip_segment((-4, -4), (14, 14), 10)
    assert (a, b) == ((0, 0), (9, 9))


def test_rasterize_and_png_round_trip(tmp_path):
    """Test segment rasterization and the mask PNG codec."""
    bits = rasterize_segments([(PixelCoord(1, 1), PixelCoord(6, 1)), (PixelCoord(3, 0), PixelCoord(3, 7))], 8)

    assert bits.sum() == 6 + 8 - 1
    assert bits[1, 1:7].all() and bits[:, 3].all()

    mask = Mask.from_bits(bits)
    assert load_mask_png(save_mask_png(mask, tmp_path / "m.png")).bits.tolist() == bits.tolist()


class TestDilation:
    """Euclidean disk dilation."""

    def test_single_pixel_disk(self):
        mask = Mask.empty(21)
        bits = mask.bits.copy()
        bits[10, 10] = True

        out = dilate(Mask.from_bits(bits), 3)

        assert out.count == 29
        assert out.bits[10, 13] and not out.bits[12, 13]
        assert out.bits[12, 12]

    @pytest.mark.property
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for radius in (0, 1, 2, 5):
            bits = rng.random((24, 24)) < 0.02
            out = dilate(Mask.from_bits(bits), radius).bits
            rows, cols = np.nonzero(bits)
            rr, cc = np.mgrid[0:24, 0:24]
            expected = np.zeros_like(bits)
            for r, c in zip(rows, cols):
                expected |= (rr - r) ** 2 + (cc - c) ** 2 <= radius * radius
            np.testing.assert_array_equal(out, expected)

    def test_empty_and_negative(self):
        assert dilate(Mask.empty(5), 4).count == 0
        with pytest.raises(ValueError):
            dilate(Mask.empty(5), -1)


class TestApplyMask:
    """Road-only and context-only masking."""

    def test_partition_identity(self):
        rng = np.random.default_rng(2)
        pixels = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        mask = Mask.from_bits(rng.random((16, 16)) < 0.3)

        road = apply_mask(pixels, mask, MaskMode.ROAD_ONLY)
        context = apply_mask(pixels, mask, MaskMode.CONTEXT_ONLY)

        np.testing.assert_array_equal(road + context, pixels)
        assert not road[~mask.bits].any()
        assert not context[mask.bits].any()
        np.testing.assert_array_equal(apply_mask(pixels, mask, "none"), pixels)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            apply_mask(np.zeros((8, 8, 3), dtype=np.uint8), Mask.empty(4), MaskMode.ROAD_ONLY)

    def test_union(self):
        a = Mask.from_bits(np.eye(4, dtype=bool))
        b = Mask.from_bits(np.fliplr(np.eye(4, dtype=bool)))
        assert (a | b).count == 8
        with pytest.raises(SizeMismatch):
            a | Mask.empty(3)


def test_road_mask_for_tile(make_road, origin):
    """Test per-class radii over a tile window."""
    frame = LocalFrame.at(origin)
    transform = GeoTransform().shifted(100, 100)
    roads = [
        make_road("maj", RoadClass.MAJOR, [(90, 110), (150, 110)]),
        make_road("trk", RoadClass.TWO_TRACK, [(120, 90), (120, 150)], tag="track"),
    ]
    cfg = DilationConfig(major_radius_px=3, minor_radius_px=2, two_track_radius_px=1)

    mask = road_mask_for_tile(roads, transform, frame, 32, cfg)

    assert polyline_to_pixels(roads[0].polyline, transform, frame, 32) == [((0, 10), (31, 10))]
    assert mask.bits[13, 0] and not mask.bits[14, 0]
    assert mask.bits[25, 21] and not mask.bits[25, 22]
    assert road_mask_for_tile([], transform, frame, 32, cfg).count == 0


def test_documented_examples():
    """Test small hand-computed rasterization and dilation cases."""
    assert set(bresenham(PixelCoord(0, 0), PixelCoord(5, 2))) == {(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)}

    bits = np.zeros((10, 10), dtype=bool)
    bits[5, 5] = True
    cross = dilate(Mask.from_bits(bits), 1)
    assert {(int(r), int(c)) for r, c in zip(*np.nonzero(cross.bits))} == {(5, 5), (4, 5), (6, 5), (5, 4), (5, 6)}

    corner = np.zeros((10, 10), dtype=bool)
    corner[0, 0] = True
    assert dilate(Mask.from_bits(corner), 1).count == 3

    pixels = np.full((4, 4, 3), 9, dtype=np.uint8)
    ones = Mask.from_bits(np.ones((4, 4), dtype=bool))
    np.testing.assert_array_equal(apply_mask(pixels, ones, MaskMode.ROAD_ONLY), pixels)
    assert not apply_mask(pixels, ones, MaskMode.CONTEXT_ONLY).any()


def test_horizontal_road_band(make_road, origin):
    """Test that a road through the tile center dilates to a band of 2r + 1 rows."""
    frame = LocalFrame.at(origin)
    road = make_road("h", RoadClass.MINOR, [(0, 16), (40, 16)])

    mask = road_mask_for_tile([road], GeoTransform(), frame, 32, DilationConfig.uniform(4))

    assert mask.bits.all(axis=1).tolist() == [12 <= row <= 20 for row in range(32)]
