"""Gabor bank, orientation energy, non-max suppression against a per-pixel reference, and the scale pyramid."""

import math

import numpy as np
import pytest
from PIL import Image

from compvocab.exceptions import FeatureExtractionError
from compvocab.services.features import (
    EnergyVolume,
    GaborBankConfig,
    build_gabor_bank,
    build_pyramid,
    contour_angle,
    extract_features,
    load_image,
    orientation_angle,
    orientation_energy,
    pyramid_sizes,
    suppress_nonmax,
)
from tests.conftest import draw_image


class TestGaborBank:
    def test_even_and_odd_kernel_per_orientation(self):
        cfg = GaborBankConfig()
        bank = build_gabor_bank(cfg)
        assert len(bank) == 2 * cfg.num_orientations
        side = 2 * cfg.radius + 1
        assert all(k.values.shape == (side, side) for k in bank)
        assert [k.orientation for k in bank[::2]] == list(range(cfg.num_orientations))

    def test_kernels_are_zero_mean(self):
        for kernel in build_gabor_bank(GaborBankConfig()):
            assert abs(kernel.values.sum()) < 1e-9

    def test_invalid_config_rejected(self):
        with pytest.raises(FeatureExtractionError):
            GaborBankConfig(num_orientations=1)
        with pytest.raises(FeatureExtractionError):
            GaborBankConfig(sigma=0.0)

    def test_angles(self):
        assert orientation_angle(3, 6) == pytest.approx(math.pi / 2)
        assert contour_angle(0, 6) == pytest.approx(math.pi / 2)
        assert contour_angle(3, 6) == pytest.approx(0.0)


class TestEnergy:
    def test_constant_image_has_no_energy(self):
        image = np.full((40, 40), 0.6)
        volume = orientation_energy(image, build_gabor_bank(GaborBankConfig()))
        assert np.all(volume.values == 0)
        assert len(extract_features(image)) == 0

    def test_energy_normalized(self, vertical_line_image):
        volume = orientation_energy(vertical_line_image, build_gabor_bank(GaborBankConfig()))
        assert volume.values.max() == pytest.approx(1.0)
        assert volume.values.min() >= 0

    def test_image_smaller_than_kernel(self):
        with pytest.raises(FeatureExtractionError):
            extract_features(np.zeros((10, 10)))


class TestFeatures:
    def test_vertical_line_gives_thin_vertical_features(self, vertical_line_image):
        fs = extract_features(vertical_line_image)
        rows = (fs.locations[:, 1] >= 20) & (fs.locations[:, 1] <= 60)
        xs = fs.locations[rows, 0]
        assert rows.sum() >= 35
        assert np.all((xs >= 37) & (xs <= 44))
        assert np.mean(fs.dominant[rows] == 0) >= 0.95

    def test_one_feature_per_row_along_the_line(self, vertical_line_image):
        fs = extract_features(vertical_line_image)
        rows = fs.locations[(fs.locations[:, 1] >= 20) & (fs.locations[:, 1] <= 60), 1]
        assert len(rows) == len(set(rows.tolist()))

    def test_translation_moves_features_exactly(self):
        image = draw_image(80, 80, [[(30, 15), (30, 55)]])
        shifted = np.zeros_like(image)
        shifted[3:, 5:] = image[:-3, :-5]
        a = extract_features(image)
        b = extract_features(shifted)
        np.testing.assert_array_equal(b.locations, a.locations + np.array([5, 3]))
        np.testing.assert_allclose(b.energies, a.energies, atol=1e-12)

    def test_no_features_inside_the_border(self, vertical_line_image):
        cfg = GaborBankConfig()
        fs = extract_features(vertical_line_image, cfg)
        r = cfg.radius
        assert np.all(fs.locations >= r)
        assert np.all(fs.locations[:, 0] < 80 - r)
        assert np.all(fs.locations[:, 1] < 80 - r)

    def test_higher_floor_keeps_fewer_features(self):
        image = draw_image(80, 80, [[(15, 15), (65, 60)], [(20, 60), (60, 25)]])
        assert len(extract_features(image, min_energy=0.5)) <= len(extract_features(image, min_energy=0.05))

    def test_feature_views(self, vertical_line_image):
        fs = extract_features(vertical_line_image, scale_index=2)
        assert fs.scale_index == 2
        first = fs.features[0]
        assert first.location == tuple(fs.locations[0])
        assert first.dominant_orientation == fs.dominant[0]


def _nonmax_by_hand(values: np.ndarray, min_energy: float, border: int) -> np.ndarray:
    """Pixel-by-pixel reference: normal direction quantized to 45 degrees, outside counts as 0."""
    h, w, n = values.shape
    keep = np.zeros((h, w), dtype=bool)

    def at(px, py, k):
        return values[py, px, k] if 0 <= px < w and 0 <= py < h else 0.0

    for y in range(border, h - border):
        for x in range(border, w - border):
            k = 0
            for i in range(1, n):
                if values[y, x, i] > values[y, x, k]:
                    k = i
            top = values[y, x, k]
            q = round(k * 180 / n / 45) % 4
            dx = round(math.cos(math.radians(45 * q)))
            dy = round(math.sin(math.radians(45 * q)))
            keep[y, x] = top >= at(x + dx, y + dy, k) and top > at(x - dx, y - dy, k) and top >= min_energy and top > 0
    return keep


def _square_image() -> np.ndarray:
    return draw_image(80, 80, [[(20, 20), (60, 20), (60, 60), (20, 60), (20, 20)]])


class TestNonMaxSuppression:
    @pytest.mark.parametrize("n", [4, 6, 8])
    @pytest.mark.parametrize("border", [0, 2])
    def test_matches_pixel_by_pixel_reference(self, n, border):
        for seed in range(20):
            values = np.random.default_rng(seed).random((12, 15, n))
            if seed % 2:
                values = np.round(values, 1)  # ties along the normal and across orientations
            expected = _nonmax_by_hand(values, 0.3, border)
            np.testing.assert_array_equal(suppress_nonmax(EnergyVolume(values), 0.3, border), expected)

    def test_extraction_keeps_exactly_the_reference_maxima(self):
        image = _square_image()
        cfg = GaborBankConfig()
        volume = orientation_energy(image, build_gabor_bank(cfg))
        ys, xs = np.nonzero(_nonmax_by_hand(volume.values, 0.1, cfg.radius))
        fs = extract_features(image, cfg, min_energy=0.1)
        np.testing.assert_array_equal(fs.locations, np.stack([xs, ys], axis=1))

    def test_square_outline_gives_four_populations(self):
        fs = extract_features(_square_image())
        x, y = fs.locations[:, 0], fs.locations[:, 1]
        mid_y = (y >= 32) & (y <= 48)
        mid_x = (x >= 32) & (x <= 48)
        populations = {
            "left": (mid_y & (np.abs(x - 20) <= 4), 0),
            "right": (mid_y & (np.abs(x - 60) <= 4), 0),
            "top": (mid_x & (np.abs(y - 20) <= 4), 3),
            "bottom": (mid_x & (np.abs(y - 60) <= 4), 3),
        }
        for side, (mask, orientation) in populations.items():
            assert mask.sum() >= 12, side
            assert np.mean(fs.dominant[mask] == orientation) >= 0.9, side
        inside = (x >= 28) & (x <= 52) & (y >= 28) & (y <= 52)
        assert not inside.any()


class TestImages:
    def test_rgb_converted_with_luma_weights(self, tmp_path):
        path = tmp_path / "red.png"
        Image.new("RGB", (4, 4), (255, 0, 0)).save(path)
        np.testing.assert_allclose(load_image(path), 0.299, atol=1e-12)

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not an image")
        with pytest.raises(FeatureExtractionError):
            load_image(path)


class TestPyramid:
    def test_sizes_stop_at_floor(self):
        assert pyramid_sizes(100, 100, 2, None, 32) == [(100, 100), (71, 71), (50, 50), (35, 35)]

    def test_level_count(self):
        pyramid = build_pyramid(np.zeros((100, 100)), scales_per_octave=2, levels=3)
        assert [p.shape for p in pyramid] == [(100, 100), (71, 71), (50, 50)]

    def test_first_level_is_the_input(self, vertical_line_image):
        pyramid = build_pyramid(vertical_line_image, levels=2)
        np.testing.assert_array_equal(pyramid[0], vertical_line_image)
