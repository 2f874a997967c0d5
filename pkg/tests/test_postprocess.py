import numpy as np
import pytest

from clustertab.docmodel import ALL_CLASSES, Box, ClassId, Word
from clustertab.labels import build_labels
from clustertab.postprocess import (
    ClusterPrediction,
    chunk_windows,
    clusters_to_boxes,
    connected_components,
    decode_probabilities,
    prediction_from_json,
    prediction_to_json,
    resolve_weak,
    strong_matrix,
)
from clustertab.tokenizer import sort_page

from conftest import random_grid_annotation, word_grid_page
from oracles import closure_components, expected_clusters


class TestStrongMatrix:
    def test_average_above_threshold(self):
        prob = np.array([[0.0, 0.95], [0.70, 0.0]])
        assert strong_matrix(prob, 0.8)[0, 1]
        assert strong_matrix(prob, 0.8)[1, 0]

    def test_average_below_threshold(self):
        prob = np.array([[0.0, 0.95], [0.70, 0.0]])
        assert not strong_matrix(prob, 0.9)[0, 1]

    def test_indifferent_model_yields_empty_graph(self):
        prob = np.full((5, 5), 0.5)
        assert not strong_matrix(prob, 0.9).any()

    def test_pad_positions_forced_false(self):
        prob = np.ones((3, 3))
        pad = np.array([True, True, False])
        s = strong_matrix(prob, 0.5, pad)
        assert s[0, 1] and not s[0, 2] and not s[2, 2]

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            strong_matrix(np.zeros((2, 2)), 0.0)

    def test_symmetric_by_construction(self):
        rng = np.random.default_rng(0)
        prob = rng.random((6, 6))
        s = strong_matrix(prob, 0.6)
        assert (s == s.T).all()


class TestConnectedComponents:
    def _strong(self, n, edges, diag=()):
        m = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            m[i, j] = m[j, i] = True
        for i in diag:
            m[i, i] = True
        return m

    def test_transitivity_repair(self):
        s = self._strong(3, [(0, 1), (1, 2)])
        assert connected_components(s) == [[0, 1, 2]]

    def test_no_edges_no_clusters(self):
        assert connected_components(self._strong(4, [])) == []

    def test_mixed_components_and_singleton(self):
        s = self._strong(5, [(0, 1), (2, 3)], diag=[4])
        assert connected_components(s) == [[0, 1], [2, 3], [4]]

    def test_matches_closure_oracle_on_random_graphs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            m = rng.random((n, n)) < 0.15
            sym = m | m.T
            assert connected_components(sym) == closure_components(sym)


class TestResolveWeak:
    def test_majority_attaches(self):
        # cluster {0,1,2}; weak edges 0->3 and 1->3: 2 > 3/2
        prob = np.zeros((4, 4))
        strong = np.zeros((4, 4), dtype=bool)
        for i, j in [(0, 1), (1, 2), (0, 2)]:
            strong[i, j] = strong[j, i] = True
        prob[0, 3] = 0.9
        prob[1, 3] = 0.8
        ext = resolve_weak(prob, strong, [[0, 1, 2]])
        assert ext == {0: {3}}

    def test_minority_does_not_attach(self):
        prob = np.zeros((4, 4))
        strong = np.zeros((4, 4), dtype=bool)
        for i, j in [(0, 1), (1, 2), (0, 2)]:
            strong[i, j] = strong[j, i] = True
        prob[0, 3] = 0.9  # only 1 of 3
        ext = resolve_weak(prob, strong, [[0, 1, 2]])
        assert ext == {}

    def test_strong_entries_are_ignored_for_weak_analysis(self):
        prob = np.zeros((3, 3))
        prob[0, 1] = 1.0  # also strong; must be zeroed first
        prob[1, 0] = 1.0
        strong = np.zeros((3, 3), dtype=bool)
        strong[0, 1] = strong[1, 0] = True
        ext = resolve_weak(prob, strong, [[0, 1]])
        assert ext == {}


class TestClustersToBoxes:
    WORDS = [
        Word("a", Box(0, 0, 10, 10)),
        Word("a", Box(20, 5, 30, 15)),
        Word("a", Box(110, 0, 150, 40)),
    ]

    def test_minmax_hull(self):
        boxes = clusters_to_boxes([[0, 1]], {}, self.WORDS, ClassId.TABLE)
        assert boxes == [Box(0, 0, 30, 15)]

    def test_row_extends_horizontally_only(self):
        boxes = clusters_to_boxes([[0, 1]], {0: {2}}, self.WORDS, ClassId.ROW)
        assert boxes == [Box(0, 0, 150, 15)]

    def test_column_extends_vertically_only(self):
        boxes = clusters_to_boxes([[0, 1]], {0: {2}}, self.WORDS, ClassId.COLUMN)
        assert boxes == [Box(0, 0, 30, 40)]

    def test_header_extends_like_row(self):
        boxes = clusters_to_boxes([[0, 1]], {0: {2}}, self.WORDS, ClassId.HEADER)
        assert boxes == [Box(0, 0, 150, 15)]

    def test_cells_take_no_extensions(self):
        boxes = clusters_to_boxes([[0, 1]], {0: {2}}, self.WORDS, ClassId.CELL)
        assert boxes == [Box(0, 0, 30, 15)]


class TestChunkWindows:
    def test_short_page_single_window(self):
        assert chunk_windows(800, 1000) == [(0, 800)]
        assert chunk_windows(0, 1000) == [(0, 0)]

    def test_1500_words_two_windows(self):
        assert chunk_windows(1500, 1000) == [(0, 1000), (500, 1500)]

    def test_longer_page_overlapping_cover(self):
        windows = chunk_windows(1700, 1000)
        assert windows[0] == (0, 1000)
        assert windows[-1][1] == 1700
        for (a0, a1), (b0, b1) in zip(windows, windows[1:]):
            assert b0 < a1, "windows must overlap"
        assert all(b - a == 1000 for a, b in windows)


class TestDecodeRoundTrip:
    def _decode_gt(self, page, ann, k=0.9):
        sorted_page = sort_page(page)
        n = sorted_page.n_words
        labels = build_labels(sorted_page, ann, seq_len=n)
        probs = {cls: labels.adjacency[cls][:n, :n].astype(float) for cls in ALL_CLASSES}
        return sorted_page, decode_probabilities(probs, sorted_page.words, k=k)

    def test_simple_grid(self):
        page, ann = word_grid_page(n_rows=2, n_cols=2, noise=1)
        sorted_page, decoded = self._decode_gt(page, ann)
        exp_clusters, exp_ext = expected_clusters(sorted_page, ann)
        for cls in ALL_CLASSES:
            got = {frozenset(c) for c in decoded[cls].clusters}
            want = {frozenset(c) for c in exp_clusters[cls]}
            assert got == want, cls

    def test_spanning_header_attachments(self):
        page, ann = word_grid_page(n_rows=2, n_cols=3, header=True, span=({0}, {0, 1}))
        sorted_page, decoded = self._decode_gt(page, ann)
        exp_clusters, exp_ext = expected_clusters(sorted_page, ann)
        col = decoded[ClassId.COLUMN]
        got = {frozenset(c): frozenset(col.span_extensions.get(i, set()))
               for i, c in enumerate(col.clusters)}
        want = {frozenset(c): frozenset(exp_ext[ClassId.COLUMN].get(i, set()))
                for i, c in enumerate(exp_clusters[ClassId.COLUMN])}
        assert got == want
        # the spanning words' own clique must have been folded into extensions
        span_words = set().union(*(e for e in exp_ext[ClassId.COLUMN].values()))
        assert span_words
        for members in got:
            assert not members <= span_words

    def test_random_pages_reconstruct_exactly(self):
        rng = np.random.default_rng(9)
        for _ in range(40):
            page, ann = random_grid_annotation(rng)
            sorted_page, decoded = self._decode_gt(page, ann)
            exp_clusters, exp_ext = expected_clusters(sorted_page, ann)
            for cls in ALL_CLASSES:
                got = {frozenset(c) for c in decoded[cls].clusters}
                want = {frozenset(c) for c in exp_clusters[cls]}
                assert got == want, cls
                index_of = {frozenset(c): i for i, c in enumerate(decoded[cls].clusters)}
                for ci, members in enumerate(exp_clusters[cls]):
                    want_ext = exp_ext[cls].get(ci, set())
                    got_ext = decoded[cls].span_extensions.get(index_of[frozenset(members)], set())
                    assert got_ext == want_ext, cls

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(21)
        prob = rng.random((12, 12)) * 0.5 + 0.45
        words = [Word("a", Box(i * 10, 0, i * 10 + 8, 8)) for i in range(12)]
        sizes = []
        for k in (0.55, 0.7, 0.85, 0.95):
            decoded = decode_probabilities({ClassId.TABLE: prob}, words, k=k)
            largest = max((len(c) for c in decoded[ClassId.TABLE].clusters), default=0)
            sizes.append(largest)
        assert sizes == sorted(sizes, reverse=True)

    def test_confidence_definition(self):
        prob = np.zeros((3, 3))
        prob[0, 1] = prob[1, 0] = 0.96
        prob[2, 2] = 1.0
        decoded = decode_probabilities({ClassId.TABLE: prob}, TestClustersToBoxes.WORDS, k=0.9)
        pred = decoded[ClassId.TABLE]
        assert pred.clusters == [[0, 1], [2]]
        assert pred.confidence[0] == pytest.approx(0.96)
        assert pred.confidence[1] == 1.0

    def test_per_class_threshold_override(self):
        prob = np.zeros((2, 2))
        prob[0, 1] = prob[1, 0] = 0.8
        words = TestClustersToBoxes.WORDS[:2]
        probs = {ClassId.TABLE: prob, ClassId.ROW: prob.copy()}
        decoded = decode_probabilities(probs, words, k={ClassId.TABLE: 0.7, ClassId.ROW: 0.9})
        assert decoded[ClassId.TABLE].clusters == [[0, 1]]
        assert decoded[ClassId.ROW].clusters == []


class TestChunkedDecode:
    def test_single_window_equals_unchunked(self):
        page, ann = word_grid_page(n_rows=3, n_cols=3)
        sorted_page = sort_page(page)
        n = sorted_page.n_words
        labels = build_labels(sorted_page, ann, seq_len=n)
        probs = {cls: labels.adjacency[cls][:n, :n].astype(float) for cls in ALL_CLASSES}
        whole = decode_probabilities(probs, sorted_page.words, k=0.9)
        windowed = decode_probabilities(probs, sorted_page.words, k=0.9, max_seq_len=n)
        for cls in ALL_CLASSES:
            assert whole[cls].clusters == windowed[cls].clusters

    def test_clusters_merge_across_windows(self):
        # 6 words, window 4: cluster {1,2,3,4} spans both windows through overlap
        prob = np.zeros((6, 6))
        for i, j in [(1, 2), (2, 3), (3, 4)]:
            prob[i, j] = prob[j, i] = 1.0
        words = [Word("a", Box(i * 10, 0, i * 10 + 8, 8)) for i in range(6)]
        decoded = decode_probabilities({ClassId.TABLE: prob}, words, k=0.9, max_seq_len=4)
        assert decoded[ClassId.TABLE].clusters == [[1, 2, 3, 4]]


def test_prediction_json_roundtrip():
    pred = {
        cls: ClusterPrediction() for cls in ALL_CLASSES
    }
    pred[ClassId.ROW] = ClusterPrediction(
        clusters=[[0, 1], [2]],
        span_extensions={0: {3}},
        boxes=[Box(0, 0, 10, 10), Box(0, 20, 10, 30)],
        confidence=[0.93, 1.0],
    )
    doc = prediction_to_json(pred)
    back = prediction_from_json(doc)
    assert back[ClassId.ROW] == pred[ClassId.ROW]
    assert back[ClassId.TABLE].clusters == []
