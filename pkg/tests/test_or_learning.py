"""Shape-context descriptors and OR-node clustering."""

import numpy as np
import pytest

from compvocab.exceptions import LearningError
from compvocab.services.inference import extend_graph
from compvocab.services.or_learning import (
    build_or_layer,
    chi2,
    collect_or_samples,
    prototype,
    provisional_or_nodes,
    replace_or_nodes,
    shape_context,
)
from compvocab.services.vocabulary import Composition, ORComposition, reference_part
from tests.conftest import estimated_layer1, graph_from_points

# eight points: centroid arithmetic stays exact under shifts and doubling
ZIGZAG = [(0, 0), (3, 1), (5, 4), (2, 6), (7, 7), (9, 2), (4, 9), (1, 3)]
L_SHAPE = [(k, 0) for k in range(8)] + [(0, k) for k in range(1, 8)]
LINE = [(k, 0) for k in range(10)]


class TestShapeContext:
    def test_histogram_is_normalized(self):
        desc = shape_context(ZIGZAG)
        assert desc.binning == (5, 12)
        assert desc.hist.sum() == pytest.approx(1.0)

    def test_invariant_to_translation(self):
        shifted = [(x + 16, y - 8) for x, y in ZIGZAG]
        np.testing.assert_array_equal(shape_context(ZIGZAG).hist, shape_context(shifted).hist)

    def test_invariant_to_scale(self):
        doubled = [(2 * x, 2 * y) for x, y in ZIGZAG]
        np.testing.assert_array_equal(shape_context(ZIGZAG).hist, shape_context(doubled).hist)

    def test_needs_two_distinct_points(self):
        with pytest.raises(LearningError):
            shape_context([(3, 3)])
        with pytest.raises(LearningError):
            shape_context([(3, 3), (3, 3)])

    def test_custom_binning(self):
        assert shape_context(ZIGZAG, radial=3, angular=8).binning == (3, 8)


class TestChi2:
    def test_symmetric_and_zero_on_self(self):
        a, b = shape_context(L_SHAPE), shape_context(LINE)
        assert chi2(a, b) == pytest.approx(chi2(b, a))
        assert chi2(a, a) == 0.0
        assert 0.0 < chi2(a, b) <= 1.0

    def test_binning_mismatch(self):
        with pytest.raises(LearningError):
            chi2(shape_context(LINE), shape_context(LINE, radial=3))

    def test_prototype_is_the_medoid(self):
        descs = [shape_context(LINE), shape_context(L_SHAPE), shape_context([(2 * x, 2 * y) for x, y in L_SHAPE])]
        assert prototype(descs) in (1, 2)
        with pytest.raises(LearningError):
            prototype([])


@pytest.fixture
def unclustered_vocab():
    vocab = estimated_layer1(3)
    vocab.ensure_layer(2).compositions.extend(
        Composition(cid, 2, [reference_part(0)]) for cid in (10, 11, 12, 13)
    )
    return vocab


class TestOrLayer:
    def test_similar_shapes_share_an_or_node(self, unclustered_vocab):
        samples = {
            10: [frozenset(L_SHAPE)],
            11: [frozenset((2 * x + 5, 2 * y + 1) for x, y in L_SHAPE)],
            12: [frozenset(LINE)],
        }
        nodes = build_or_layer(unclustered_vocab, 2, samples)
        assert nodes == [
            ORComposition(3, 2, (10, 11)),
            ORComposition(4, 2, (12,)),
            ORComposition(5, 2, (13,)),
        ]

    def test_zero_cutoff_keeps_distinct_shapes_apart(self, unclustered_vocab):
        samples = {10: [frozenset(L_SHAPE)], 11: [frozenset(LINE)]}
        nodes = build_or_layer(unclustered_vocab, 2, samples, cutoff=0.0, compositions=[10, 11])
        assert [n.members for n in nodes] == [(10,), (11,)]

    def test_existing_or_nodes_untouched(self, unclustered_vocab):
        layer = unclustered_vocab.layer(2)
        layer.or_nodes.append(ORComposition(3, 2, (10,)))
        nodes = build_or_layer(unclustered_vocab, 2, {})
        assert sorted(m for n in nodes for m in n.members) == [11, 12, 13]
        assert min(n.id for n in nodes) == 4

    def test_provisional_and_replace(self, unclustered_vocab):
        layer = unclustered_vocab.layer(2)
        provisional = provisional_or_nodes(list(reversed(layer.compositions)), 7)
        assert [(n.id, n.members) for n in provisional] == [(7, (10,)), (8, (11,)), (9, (12,)), (10, (13,))]
        layer.or_nodes = list(provisional)
        replace_or_nodes(unclustered_vocab, 2, [7, 8], [ORComposition(11, 2, (10, 11))])
        assert [n.id for n in layer.or_nodes] == [9, 10, 11]
        assert unclustered_vocab.or_of(2)[11] == 11


class TestSamples:
    def test_supports_of_top_states(self, two_class_vocab):
        graph = graph_from_points(two_class_vocab, [(0, 10, 10, 0.9), (1, 14, 10, 0.8)], 30, 30)
        extend_graph(graph, two_class_vocab, 2)
        samples = collect_or_samples(two_class_vocab, 2, [graph], [10, 11])
        assert samples == {10: [frozenset({(10, 10), (14, 10)})], 11: []}

    def test_graph_must_reach_the_layer(self, two_class_vocab):
        graph = graph_from_points(two_class_vocab, [(0, 10, 10, 0.9)], 30, 30)
        with pytest.raises(LearningError):
            collect_or_samples(two_class_vocab, 2, [graph], [10])
