"""Inference: deformation windows, composition scoring against a brute-force
oracle, downsampling, OR pooling, supports and the class layer."""

import math

import numpy as np
import pytest

from compvocab.exceptions import InferenceError
from compvocab.services.inference import (
    InferenceGraph,
    StateRef,
    StateTable,
    bounding_box,
    build_layer,
    deformation,
    downsample,
    dump_graph,
    extend_graph,
    infer,
    infer_class_layer,
    match_layer1,
    parse_graph,
    part_window,
    pool_or,
    score_composition,
    support,
    truncate_graph,
    window_cutoff,
)
from compvocab.services.vocabulary import (
    AppearanceParam,
    Composition,
    GeometryParam,
    ORComposition,
    Part,
    Polarity,
    layer1_default,
    reference_part,
)
from tests.conftest import add_composition, estimated_layer1, graph_from_points


# ── Oracle ────────────────────────────────────────────────────────────────────

def brute_force_layer(comps, lower: StateTable, tau: float, alpha: float) -> dict:
    cutoff2 = window_cutoff(tau) ** 2
    out = {}
    for comp in comps:
        for a in range(len(lower)):
            ax, ay = lower.xs[a], lower.ys[a]
            w0 = comp.parts[0].appearance.weights.get(int(lower.nodes[a]), 0.0)
            if w0 <= 0:
                continue
            total = lower.scores[a] * w0
            for part in comp.parts[1:]:
                inv = np.linalg.inv(part.geometry.sigma)
                best = 0.0
                for s in range(len(lower)):
                    w = part.appearance.weights.get(int(lower.nodes[s]), 0.0)
                    if w <= 0:
                        continue
                    d = np.array([lower.xs[s] - ax, lower.ys[s] - ay], dtype=float) - part.geometry.mu
                    m2 = d @ inv @ d
                    if m2 > cutoff2 + 1e-12:
                        continue
                    if part.is_repulsive:
                        best = max(best, lower.scores[s] * w)
                    else:
                        best = max(best, lower.scores[s] * math.exp(-0.5 * m2) * w)
                total *= alpha * (1.0 - best) if part.is_repulsive else best
            if total > 0 and total >= tau:
                key = (comp.id, int(ax), int(ay))
                out[key] = max(out.get(key, 0.0), total)
    return out


def random_instance(rng: np.random.Generator):
    vocab = estimated_layer1(3)
    comps = []
    for k in range(2):
        parts = [reference_part(int(rng.integers(3)))]
        for _ in range(int(rng.integers(1, 4))):
            a = rng.normal(size=(2, 2))
            cov = a @ a.T + 0.5 * np.eye(2)
            polarity = Polarity.REPULSIVE if rng.random() < 0.25 else Polarity.NORMAL
            parts.append(Part(
                AppearanceParam.one_hot(int(rng.integers(3))),
                GeometryParam.from_arrays(rng.uniform(-5, 5, size=2), cov),
                polarity,
            ))
        comp = Composition(10 + k, 2, parts)
        vocab.add_compositions(2, [comp], [ORComposition(20 + k, 2, (comp.id,))])
        comps.append(comp)
    n = int(rng.integers(5, 40))
    points = np.column_stack([
        rng.integers(0, 3, size=n),
        rng.integers(0, 20, size=n),
        rng.integers(0, 20, size=n),
        rng.uniform(0.05, 1.0, size=n),
    ])
    return vocab, comps, graph_from_points(vocab, points, 20, 20)


# ── Geometry ──────────────────────────────────────────────────────────────────

class TestDeformation:
    def test_one_at_the_mean(self):
        geom = GeometryParam.from_arrays((3.0, -2.0), [[4.0, 1.0], [1.0, 2.0]])
        assert deformation((3.0, -2.0), geom) == 1.0

    def test_one_sigma(self):
        geom = GeometryParam.from_arrays((0.0, 0.0), [[4.0, 0.0], [0.0, 1.0]])
        assert deformation((2.0, 0.0), geom) == pytest.approx(math.exp(-0.5))
        assert deformation((0.0, -1.0), geom) == pytest.approx(math.exp(-0.5))

    def test_singular_covariance(self):
        with pytest.raises(InferenceError):
            deformation((0, 0), GeometryParam.isotropic((0, 0), 0.0))

    def test_cutoff(self):
        assert window_cutoff(0.05) == pytest.approx(math.sqrt(-2 * math.log(0.05)))
        assert math.isfinite(window_cutoff(0.0))

    def test_window_holds_exactly_the_offsets_above_tau(self):
        geom = GeometryParam.from_arrays((2.3, -1.2), [[3.0, 1.0], [1.0, 2.0]])
        offsets, values = part_window(geom, 0.1)
        assert np.all(values >= 0.1 - 1e-12)
        computed = np.array([deformation(o, geom) for o in offsets])
        np.testing.assert_allclose(values, computed, rtol=1e-9)
        inside = {tuple(o) for o in offsets.tolist()}
        for dx in range(-10, 13):
            for dy in range(-12, 10):
                if deformation((dx, dy), geom) >= 0.1 + 1e-9:
                    assert (dx, dy) in inside
        assert offsets.tolist() == sorted(offsets.tolist())


# ── Scoring ───────────────────────────────────────────────────────────────────

class TestBuildLayer:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(20240611)
        for _ in range(100):
            vocab, comps, graph = random_instance(rng)
            table = build_layer(graph, 2, vocab, tau=0.05, alpha=0.1)
            expected = brute_force_layer(comps, graph.pooled[1], 0.05, 0.1)
            got = {
                (int(n), int(x), int(y)): float(s)
                for n, x, y, s in zip(table.nodes, table.xs, table.ys, table.scores)
            }
            assert got.keys() == expected.keys()
            for key, value in expected.items():
                assert got[key] == pytest.approx(value, rel=1e-9)
            assert np.all((table.scores > 0) & (table.scores <= 1))

    def test_single_anchor_agrees_with_build_layer(self):
        rng = np.random.default_rng(7)
        vocab, comps, graph = random_instance(rng)
        lower = graph.pooled[1]
        table = build_layer(graph, 2, vocab, tau=0.05, alpha=0.1)
        for r in range(len(table)):
            comp = vocab.composition(int(table.nodes[r]))
            anchor = int(np.nonzero(
                (lower.xs == table.xs[r]) & (lower.ys == table.ys[r])
                & np.isin(lower.nodes, comp.parts[0].appearance.support)
            )[0][0])
            score, kids = score_composition(comp, anchor, lower, graph.shapes[1], tau=0.05, alpha=0.1)
            assert score == pytest.approx(table.scores[r], rel=1e-12)
            assert kids == table.child_rows(r).tolist()

    def test_two_part_composition(self):
        vocab = estimated_layer1(3)
        add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (4.0, 0.0), 1.0)])
        graph = graph_from_points(vocab, [(0, 5, 5, 0.9), (1, 9, 5, 0.8), (1, 10, 6, 1.0)], 20, 20)
        table = build_layer(graph, 2, vocab)
        assert len(table) == 1
        # (10, 6) sits one unit off in both axes: 1.0 * exp(-1) < 0.8
        assert table.scores[0] == pytest.approx(0.9 * 0.8)
        child = graph.pooled[1].state(int(table.child_rows(0)[1]))
        assert (child.x, child.y) == (9, 5)

    def test_repulsive_part_damps_the_score(self):
        vocab = estimated_layer1(3)
        comp = add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (4.0, 0.0), 1.0)])
        comp.parts.append(Part(AppearanceParam.one_hot(2), GeometryParam.isotropic((0.0, 4.0), 1.0), Polarity.REPULSIVE))
        points = [(0, 5, 5, 1.0), (1, 9, 5, 1.0)]
        clean = build_layer(graph_from_points(vocab, points, 20, 20), 2, vocab, alpha=0.5)
        cluttered = build_layer(graph_from_points(vocab, points + [(2, 5, 9, 0.6)], 20, 20), 2, vocab, alpha=0.5)
        assert clean.scores[0] == pytest.approx(0.5)
        assert cluttered.scores[0] == pytest.approx(0.5 * 0.4)
        assert len(clean.child_rows(0)) == 2

    def test_below_threshold_dropped(self):
        vocab = estimated_layer1(3)
        add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(1, (4.0, 0.0), 1.0)])
        graph = graph_from_points(vocab, [(0, 5, 5, 0.2), (1, 9, 5, 0.2)], 20, 20)
        assert len(build_layer(graph, 2, vocab, tau=0.05)) == 0
        assert len(build_layer(graph, 2, vocab, tau=0.03)) == 1
        vocab.composition(10).threshold = 0.045
        assert len(build_layer(graph, 2, vocab, tau=0.03)) == 0

    def test_missing_lower_layer(self, two_class_vocab):
        with pytest.raises(InferenceError):
            build_layer(InferenceGraph(10, 10), 2, two_class_vocab)


class TestLayer1:
    def test_unestimated_models_rejected(self, vertical_line_image):
        with pytest.raises(InferenceError):
            infer(vertical_line_image, layer1_default(6))

    def test_scores_in_unit_interval(self, vertical_line_image):
        graph = infer(vertical_line_image, estimated_layer1(6), up_to_layer=1)
        table = match_layer1(graph.features, estimated_layer1(6))
        assert len(table) > 0
        assert np.all((table.scores > 0) & (table.scores <= 1))

    def test_bad_depth(self, vertical_line_image):
        with pytest.raises(InferenceError):
            infer(vertical_line_image, estimated_layer1(6), up_to_layer=2)
        with pytest.raises(InferenceError):
            infer(None, estimated_layer1(6))


class TestGridOps:
    def test_downsample_keeps_the_best_per_cell(self):
        states = StateTable.build([4, 4, 5], [3, 2, 2], [5, 4, 4], [0.3, 0.7, 0.1], [np.array([0]), np.array([1]), np.array([2])])
        out = downsample(states, 0.5)
        assert out.nodes.tolist() == [4, 5]
        assert list(zip(out.xs.tolist(), out.ys.tolist())) == [(1, 2), (1, 2)]
        np.testing.assert_allclose(out.scores, [0.7, 0.1])
        assert out.child_rows(0).tolist() == [1]

    def test_downsample_factor_range(self):
        with pytest.raises(InferenceError):
            downsample(StateTable.empty(), 0.0)
        with pytest.raises(InferenceError):
            downsample(StateTable.empty(), 1.5)

    def test_pool_or_merges_members(self):
        vocab = estimated_layer1(3)
        vocab.add_compositions(2, [
            Composition(10, 2, [reference_part(0)]),
            Composition(11, 2, [reference_part(1)]),
        ], [ORComposition(20, 2, (10, 11))])
        states = StateTable.build([10, 11, 11], [1, 1, 2], [1, 1, 1], [0.4, 0.6, 0.2])
        pooled = pool_or(states, vocab, 2)
        assert pooled.nodes.tolist() == [20, 20]
        np.testing.assert_allclose(pooled.scores, [0.6, 0.2])
        assert pooled.child_rows(0).tolist() == [1]

    def test_pool_or_unknown_composition(self):
        with pytest.raises(InferenceError):
            pool_or(StateTable.build([99], [0], [0], [0.5]), estimated_layer1(3), 1)


class TestLineImage:
    @pytest.fixture
    def line_vocab(self):
        vocab = estimated_layer1(6)
        add_composition(vocab, 2, 10, 20, ref_or=0, parts=[(0, (0.0, 6.0), 1.0)])
        return vocab

    def test_collinear_segments_compose(self, vertical_line_image, line_vocab):
        graph = infer(vertical_line_image, line_vocab, up_to_layer=1)
        table = build_layer(graph, 2, line_vocab)
        mid = np.nonzero((table.ys >= 20) & (table.ys <= 50))[0]
        assert len(mid) >= 25
        assert np.all((table.xs[mid] >= 37) & (table.xs[mid] <= 44))
        lower = graph.pooled[1]
        for r in mid[:5]:
            ref, part = table.child_rows(r)
            assert lower.ys[part] - lower.ys[ref] == 6
            assert table.scores[r] == pytest.approx(lower.scores[ref] * lower.scores[part])

    def test_full_graph_and_supports(self, vertical_line_image, line_vocab):
        graph = infer(vertical_line_image, line_vocab)
        assert graph.depth == 2
        assert graph.scales[2] == 0.5
        assert graph.shapes[2] == (40, 40)
        top = graph.composed[2]
        # a state from the middle of the line, away from its ends
        row = int(np.nonzero((top.ys >= 12) & (top.ys <= 24))[0][0])
        points = sorted(support(graph, StateRef(2, False, row)))
        assert len(points) == 2
        assert points[0][0] == points[1][0]
        assert points[1][1] - points[0][1] == 6
        pg = parse_graph(graph, StateRef(2, True, 0))
        assert pg.nodes[0] == StateRef(2, True, 0)
        assert len(pg.edges) == len(pg.nodes) - 1

    def test_truncate_drops_upper_layers(self, vertical_line_image, line_vocab):
        graph = infer(vertical_line_image, line_vocab)
        support(graph, StateRef(2, True, 0))
        truncate_graph(graph, 1)
        assert graph.depth == 1
        assert 2 not in graph.composed and 2 not in graph.scales
        assert all(r.layer == 1 for r in graph._supports)
        extend_graph(graph, line_vocab, 2)
        assert graph.depth == 2

    def test_dump(self, vertical_line_image, line_vocab):
        dump = dump_graph(infer(vertical_line_image, line_vocab))
        assert [entry["layer"] for entry in dump["layers"]] == [1, 2]
        assert dump["layers"][1]["grid"] == [40, 40]


class TestClassLayer:
    def test_object_states_become_class_states(self, two_class_vocab):
        graph = graph_from_points(two_class_vocab, [(0, 10, 10, 0.9), (1, 14, 10, 0.8)], 30, 30)
        extend_graph(graph, two_class_vocab, 3)
        labels, table = infer_class_layer(graph, two_class_vocab)
        assert labels == ["a", "b"]
        assert table.nodes.tolist() == [0]
        assert table.scores[0] == pytest.approx(0.72)
        assert sorted(support(graph, StateRef(3, False, int(table.child_rows(0)[0])))) == [(10, 10), (14, 10)]

    def test_no_classes(self):
        graph = graph_from_points(estimated_layer1(3), [(0, 1, 1, 0.5)], 5, 5)
        labels, table = infer_class_layer(graph, estimated_layer1(3))
        assert labels == [] and len(table) == 0


def test_bounding_box():
    assert bounding_box({(1, 2), (3, 5)}) == (1, 2, 4, 6)
    assert bounding_box({(1, 2)}, padding=1) == (0, 1, 3, 4)
    with pytest.raises(InferenceError):
        bounding_box(set())
