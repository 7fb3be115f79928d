"""Layer-1 Gaussians, geometry refits and object-layer appearance weights."""

import numpy as np
import pytest

from compvocab.exceptions import LearningError
from compvocab.services.features import FeatureSet
from compvocab.services.inference import extend_graph
from compvocab.services.param_learning import (
    apply_layer1,
    estimate_layer1_params,
    estimate_object_appearance,
    reestimate_geometry,
)
from compvocab.services.vocabulary import layer1_default, validate
from tests.conftest import add_composition, estimated_layer1, graph_from_points


def _features(energies: np.ndarray) -> FeatureSet:
    n = len(energies)
    locations = np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64)]).astype(np.int64)
    return FeatureSet(locations, np.asarray(energies, dtype=np.float64), 64, 64)


@pytest.fixture
def energies() -> np.ndarray:
    rng = np.random.default_rng(42)
    vertical = np.column_stack([np.ones(30), rng.uniform(0, 0.5, 30), rng.uniform(0, 0.3, 30)])
    oblique = np.column_stack([rng.uniform(0, 0.4, 4), np.ones(4), rng.uniform(0, 0.4, 4)])
    return np.vstack([vertical, oblique])


class TestLayer1:
    def test_fit_and_prior_fallback(self, energies):
        fits = estimate_layer1_params([_features(energies)], 3)
        assert [f.count for f in fits] == [30, 4, 0]
        assert [f.from_prior for f in fits] == [False, True, True]
        np.testing.assert_allclose(fits[0].mean, energies[:30].mean(axis=0))
        assert np.linalg.eigvalsh(fits[0].cov).min() >= 0.01 - 1e-12
        np.testing.assert_array_equal(fits[1].mean, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(fits[2].cov, np.eye(3) * 0.05)

    def test_energies_normalized_by_their_peak(self, energies):
        fits = estimate_layer1_params([_features(energies * 3.0)], 3)
        np.testing.assert_allclose(fits[0].mean, energies[:30].mean(axis=0))

    def test_independent_of_image_order(self, energies):
        parts = [_features(energies[i::3]) for i in range(3)]
        a = estimate_layer1_params(parts, 3)
        b = estimate_layer1_params(parts[::-1], 3)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.mean, fb.mean)
            np.testing.assert_array_equal(fa.cov, fb.cov)

    def test_no_features_uses_prior_everywhere(self):
        fits = estimate_layer1_params([], 4)
        assert all(f.from_prior for f in fits)

    def test_orientation_count_mismatch(self, energies):
        with pytest.raises(LearningError):
            estimate_layer1_params([_features(energies)], 4)

    def test_apply(self, energies):
        vocab = layer1_default(3)
        apply_layer1(vocab, estimate_layer1_params([_features(energies)], 3))
        assert all(c.estimated for c in vocab.layer(1).compositions)
        assert validate(vocab) == []
        np.testing.assert_allclose(vocab.composition(0).mean1, energies[:30].mean(axis=0))

    def test_apply_unknown_orientation(self, energies):
        fits = estimate_layer1_params([_features(energies)], 3)
        with pytest.raises(LearningError):
            apply_layer1(layer1_default(2), fits)


class TestGeometry:
    def _graphs(self, vocab):
        graphs = []
        for g in range(2):
            points = []
            for k in range(4):
                x, y = 5 + 14 * k, 5 + 10 * g
                points += [(0, x, y, 0.9), (1, x + 5, y, 0.8)]
            graphs.append(graph_from_points(vocab, points, 64, 32))
        return graphs

    def test_part_mean_moves_to_the_data(self):
        vocab = estimated_layer1(3)
        comp = add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (3.0, 0.0), 1.0)])
        result = reestimate_geometry(vocab, 2, self._graphs(vocab))
        assert comp.parts[1].geometry.mean == pytest.approx((5.0, 0.0))
        assert np.linalg.eigvalsh(comp.parts[1].geometry.sigma).min() == pytest.approx(0.25)
        assert all(b >= a - 1e-12 for a, b in zip(result.history, result.history[1:]))
        assert result.history[-1] > result.history[0]
        assert not result.rolled_back
        assert result.untouched == []

    def test_reference_part_never_refit(self):
        vocab = estimated_layer1(3)
        comp = add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (3.0, 0.0), 1.0)])
        before = comp.parts[0]
        reestimate_geometry(vocab, 2, self._graphs(vocab))
        assert comp.parts[0] == before

    def test_silent_composition_reported(self):
        vocab = estimated_layer1(3)
        add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (3.0, 0.0), 1.0)])
        silent = add_composition(vocab, 2, 11, 21, ref_or=2, parts=[(1, (3.0, 0.0), 1.0)])
        before = list(silent.parts)
        result = reestimate_geometry(vocab, 2, self._graphs(vocab))
        assert result.untouched == [11]
        assert silent.parts == before

    def test_zero_rounds(self):
        vocab = estimated_layer1(3)
        comp = add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (3.0, 0.0), 1.0)])
        result = reestimate_geometry(vocab, 2, self._graphs(vocab), rounds=0)
        assert len(result.history) == 1
        assert comp.parts[1].geometry.mean == (3.0, 0.0)


class TestObjectAppearance:
    def test_colocated_alternatives_share_the_weight(self):
        vocab = estimated_layer1(3, object_layer=3)
        add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (4.0, 0.0), 1.0)])
        add_composition(vocab, 2, 12, 22, ref_or=2, parts=[(1, (4.0, 0.0), 1.0)])
        add_composition(vocab, 3, 30, 40, ref_or=20)
        vocab.class_layer = {"a": [30]}
        graph = graph_from_points(vocab, [(0, 10, 10, 0.9), (2, 10, 10, 0.7), (1, 14, 10, 0.8)], 30, 30)
        extend_graph(graph, vocab, 3)
        updated = estimate_object_appearance(vocab, [graph])
        assert updated == {30: [{20: 0.5, 22: 0.5}]}
        assert vocab.composition(30).parts[0].appearance.weights == {20: 0.5, 22: 0.5}
        assert validate(vocab) == []

    def test_no_detections_keeps_one_hot(self, two_class_vocab):
        graph = graph_from_points(two_class_vocab, [(2, 3, 3, 0.9)], 30, 30)
        extend_graph(graph, two_class_vocab, 3)
        assert estimate_object_appearance(two_class_vocab, [graph]) == {}
        assert two_class_vocab.composition(30).parts[0].appearance.weights == {20: 1.0}
