import json

import numpy as np
import pytest

from conftest import tiny_cohort
from stasmil.attribution import (AttributionMap, attribute, cell_density_raster,
                                 heat_color, render_heatmap, top_patches)
from stasmil.model import ModelConfig, init_params


@pytest.fixture(scope="module")
def attributed():
    cfg = ModelConfig.small()
    bag = tiny_cohort(2, seed=41, feature_dim=cfg.feature_dim,
                      n_small=12, n_large=6, n_cells=20)[0]
    params = init_params(cfg, 3)
    return bag, attribute(bag, params, cfg)


class TestAttribute:
    def test_scores_in_unit_interval(self, attributed):
        _, res = attributed
        for amap in res.maps.values():
            assert amap.scores.min() >= 0.0 and amap.scores.max() <= 1.0

    def test_normalized_scores_span_unit_interval(self, attributed):
        _, res = attributed
        for amap in res.maps.values():
            if amap.raw.max() > amap.raw.min():
                assert amap.scores.min() == 0.0 and amap.scores.max() == 1.0

    def test_one_score_per_patch(self, attributed):
        bag, res = attributed
        assert len(res.maps["small"].scores) == len(bag.coords_small)
        assert len(res.maps["large"].scores) == len(bag.coords_large)
        assert len(res.cell_scores) == len(bag.cells)

    def test_repeated_calls_identical(self, attributed):
        bag, res = attributed
        cfg = ModelConfig.small()
        params = init_params(cfg, 3)
        res2 = attribute(bag, params, cfg)
        for tag in ("small", "large"):
            assert np.array_equal(res.maps[tag].scores, res2.maps[tag].scores)

    def test_raw_mass_positive(self, attributed):
        _, res = attributed
        for amap in res.maps.values():
            assert np.all(amap.raw >= 0.0)
            assert amap.raw.sum() > 0.0

    def test_sidecar_json(self, attributed):
        bag, res = attributed
        payload = json.loads(res.maps["small"].sidecar_json())
        assert payload["scale"] == "small"
        assert len(payload["patches"]) == len(bag.coords_small)
        entry = payload["patches"][0]
        assert set(entry) == {"x", "y", "tile", "score"}

    def test_bin_preserving_permutation_permutes_scores(self):
        """Swapping patch storage order inside one pooling bin leaves every
        patch's score attached to the same patch (pooling is index-range
        based, so only bin-preserving reorderings keep the token sequence)."""
        import copy

        cfg = ModelConfig.small()
        bag = tiny_cohort(2, seed=43, feature_dim=cfg.feature_dim,
                          n_small=16, n_large=8, n_cells=20)[0]
        params = init_params(cfg, 5)
        base = attribute(bag, params, cfg)
        # small branch: 16 patches into 8 bins of width 2; swap inside bin 0
        swapped = copy.deepcopy(bag)
        order = np.arange(16)
        order[[0, 1]] = order[[1, 0]]
        swapped.coords_small = swapped.coords_small[order]
        swapped.features_small = swapped.features_small[order]
        res = attribute(swapped, params, cfg)
        assert np.allclose(res.maps["small"].scores[order],
                           base.maps["small"].scores, atol=1e-12)


class TestMinMaxConvention:
    def test_single_patch_maps_to_half(self):
        amap = AttributionMap("small", 256, np.array([[0, 0]]), np.array([0.5]),
                              np.array([0.7]))
        from stasmil.attribution import _minmax
        assert np.array_equal(_minmax(np.array([0.7])), [0.5])

    def test_linear_rescale(self):
        from stasmil.attribution import _minmax
        assert np.allclose(_minmax(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])


class TestHeatColor:
    def test_endpoints(self):
        assert heat_color(0.0) == (0, 0, 255)
        assert heat_color(1.0) == (255, 0, 0)

    def test_midpoints(self):
        assert heat_color(1 / 3) == (0, 255, 255)
        assert heat_color(2 / 3) == (255, 255, 0)

    def test_clamps(self):
        assert heat_color(-5.0) == (0, 0, 255)
        assert heat_color(5.0) == (255, 0, 0)


class TestRenderHeatmap:
    def test_byte_identical_renders(self, tmp_path, attributed):
        _, res = attributed
        amap = res.maps["small"]
        render_heatmap(amap, tmp_path / "a.png")
        render_heatmap(amap, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_render_over_base(self, tmp_path, attributed):
        bag, res = attributed
        base = cell_density_raster(bag)
        img = render_heatmap(res.maps["small"], tmp_path / "c.png", base=base)
        assert img.size == base.size

    def test_coordinates_outside_base_rejected(self, tmp_path, attributed):
        from PIL import Image

        _, res = attributed
        tiny = Image.new("RGB", (4, 4))
        with pytest.raises(ValueError):
            render_heatmap(res.maps["small"], tmp_path / "d.png", base=tiny)


class TestTopPatches:
    def map_with_scores(self, scores):
        n = len(scores)
        coords = np.column_stack([np.arange(n) * 256, np.zeros(n, dtype=int)])
        return AttributionMap("small", 256, coords, np.asarray(scores, dtype=float),
                              np.asarray(scores, dtype=float))

    def test_twelve_distinct_scores(self):
        amap = self.map_with_scores(np.arange(12) / 11)
        tiers = top_patches(amap, n=4)
        assert tiers["high"] == [8, 9, 10, 11]
        assert tiers["low"] == [0, 1, 2, 3]
        # median is 5.5/11; the 4 nearest scores are 4..7
        assert tiers["middle"] == [4, 5, 6, 7]

    def test_all_equal_uses_index_order(self):
        amap = self.map_with_scores(np.full(12, 0.5))
        tiers = top_patches(amap, n=4)
        assert tiers["low"] == [0, 1, 2, 3]
        assert tiers["high"] == [0, 1, 2, 3]
        assert tiers["middle"] == [0, 1, 2, 3]

    def test_minimal_three_patches(self):
        amap = self.map_with_scores([0.1, 0.5, 0.9])
        tiers = top_patches(amap, n=1)
        assert tiers == {"high": [2], "middle": [1], "low": [0]}

    def test_too_few_patches_rejected(self):
        with pytest.raises(ValueError):
            top_patches(self.map_with_scores([0.1, 0.9]), n=1)
