import math

import numpy as np
import pytest

from graphtopics.graph_data import (
    AdjacencyGraph,
    DataError,
    SparseCountMatrix,
    build_cosine_adjacency,
    load_content_cites,
    load_corpus,
    load_edge_list,
    load_triples,
    normalize_adjacency,
    split_edges,
    standard_label_split,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestLoadCorpus:
    def test_triples_direct_transcription(self, tmp_path):
        path = write(tmp_path, "x.txt", "0 3 2\n1 0 1\n")
        x = load_triples(path)
        assert x.num_nodes == 2
        assert x.vocab_size >= 4
        entries = set(zip(x.cols.tolist(), x.rows.tolist(), x.counts.tolist()))
        assert entries == {(0, 3, 2), (1, 0, 1)}

    def test_empty_file_is_no_nodes(self, tmp_path):
        path = write(tmp_path, "empty.txt", "")
        with pytest.raises(DataError, match="no nodes"):
            load_triples(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = write(tmp_path, "bad.txt", "0 1 2\n0 1\n")
        with pytest.raises(DataError, match="bad.txt:2"):
            load_triples(path)

    def test_negative_count_rejected(self, tmp_path):
        path = write(tmp_path, "neg.txt", "0 1 -3\n")
        with pytest.raises(DataError, match="negative"):
            load_triples(path)

    def test_duplicate_entry_rejected(self):
        x = SparseCountMatrix(2, 4, np.array([1, 1]), np.array([0, 0]), np.array([1, 2]))
        with pytest.raises(DataError, match="duplicate"):
            x.validate()

    def test_content_cites_roundtrip(self, tmp_path):
        content = write(
            tmp_path,
            "c.content",
            "p1 1 0 1 sports\np2 0 1 0 politics\np3 1 1 0 sports\n",
        )
        cites = write(tmp_path, "c.cites", "p1 p2\np2 p3\np1 p1\npX p1\n")
        x, labels, graph, id_map = load_content_cites(content, cites)
        assert x.num_nodes == 3 and x.vocab_size == 3
        assert labels.num_classes == 2
        assert graph.num_edges == 2  # self-cite and unknown id dropped
        assert id_map == {"p1": 0, "p2": 1, "p3": 2}

    def test_load_corpus_dispatch(self, tmp_path):
        path = write(tmp_path, "x.txt", "0 0 1\n")
        x, labels = load_corpus(path, "tsv-triples")
        assert labels is None and x.num_nodes == 1
        with pytest.raises(DataError, match="unknown corpus format"):
            load_corpus(path, "bogus")


class TestCosineAdjacency:
    def _x(self, rows):
        arr = np.asarray(rows)
        j, v = np.nonzero(arr)
        return SparseCountMatrix(arr.shape[0], arr.shape[1], v, j, arr[j, v])

    def test_identical_vectors_always_edge(self):
        x = self._x([[1, 2, 0], [1, 2, 0]])
        graph = build_cosine_adjacency(x, 0.99)
        assert graph.edge_set() == {(0, 1)}

    def test_orthogonal_vectors_no_edge(self):
        x = self._x([[1, 0, 0], [0, 1, 0]])
        assert build_cosine_adjacency(x, 0.5).num_edges == 0

    def test_hand_evaluated_cosine_at_threshold(self):
        # cos((1,1,0),(1,0,0)) = 1/sqrt(2) ~ 0.7071 >= 0.7
        x = self._x([[1, 1, 0], [1, 0, 0]])
        assert build_cosine_adjacency(x, 0.7).edge_set() == {(0, 1)}
        assert build_cosine_adjacency(x, 0.71).num_edges == 0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        base = rng.integers(0, 5, size=(6, 8))
        base[base.sum(axis=1) == 0, 0] = 1
        scaled = base.copy()
        scaled[2] *= 7  # positive rescaling of one document
        e1 = build_cosine_adjacency(self._x(base), 0.6).edge_set()
        e2 = build_cosine_adjacency(self._x(scaled), 0.6).edge_set()
        assert e1 == e2

    def test_zero_document_named(self):
        x = self._x([[1, 0], [0, 0]])
        x = SparseCountMatrix(2, 2, x.rows, x.cols, x.counts)
        with pytest.raises(DataError, match="node 1"):
            build_cosine_adjacency(x, 0.5)

    def test_threshold_range_checked(self):
        x = self._x([[1, 0], [0, 1]])
        with pytest.raises(DataError):
            build_cosine_adjacency(x, 1.5)


class TestNormalizeAdjacency:
    def test_two_nodes_with_self_loops_all_half(self):
        graph = AdjacencyGraph.from_pairs(2, [[0, 1]])
        norm = normalize_adjacency(graph, add_self_loops=True)
        assert np.allclose(norm.matrix.toarray(), 0.5)

    def test_two_nodes_without_self_loops_identity_pattern(self):
        graph = AdjacencyGraph.from_pairs(2, [[0, 1]])
        norm = normalize_adjacency(graph, add_self_loops=False)
        assert np.allclose(norm.matrix.toarray(), [[0, 1], [1, 0]])

    def test_path_graph_values(self):
        graph = AdjacencyGraph.from_pairs(3, [[0, 1], [1, 2]])
        norm = normalize_adjacency(graph, add_self_loops=False).matrix.toarray()
        expect = 1 / math.sqrt(2)
        assert norm[0, 1] == pytest.approx(expect)
        assert norm[1, 2] == pytest.approx(expect)
        assert norm[0, 2] == 0

    def test_symmetry_and_row_sum_bound(self):
        rng = np.random.default_rng(1)
        pairs = set()
        while len(pairs) < 20:
            i, j = rng.integers(0, 12, size=2)
            if i != j:
                pairs.add((min(i, j), max(i, j)))
        graph = AdjacencyGraph.from_pairs(12, sorted(pairs))
        norm = normalize_adjacency(graph, add_self_loops=True).matrix.toarray()
        assert np.allclose(norm, norm.T)
        max_deg = (graph.degrees() + 1).max()
        assert norm.sum(axis=1).max() <= math.sqrt(max_deg) + 1e-12

    def test_isolated_node_without_self_loops_errors(self):
        graph = AdjacencyGraph.from_pairs(3, [[0, 1]])
        with pytest.raises(DataError, match="isolated"):
            normalize_adjacency(graph, add_self_loops=False)


class TestSplitEdges:
    def _graph(self, n=30, target=100, seed=0):
        rng = np.random.default_rng(seed)
        pairs = set()
        while len(pairs) < target:
            i, j = rng.integers(0, n, size=2)
            if i != j:
                pairs.add((min(i, j), max(i, j)))
        return AdjacencyGraph.from_pairs(n, sorted(pairs))

    def test_five_and_ten_percent(self):
        graph = self._graph()
        split = split_edges(graph, 0.05, 0.10, seed=3)
        assert len(split.val_edges) == 5
        assert len(split.test_edges) == 10
        assert split.train.num_edges == 85

    def test_zero_fractions(self):
        graph = self._graph()
        split = split_edges(graph, 0.0, 0.0, seed=3)
        assert split.train.num_edges == graph.num_edges
        assert len(split.val_edges) == 0 and len(split.test_edges) == 0

    def test_deterministic_given_seed(self):
        graph = self._graph()
        a = split_edges(graph, 0.1, 0.2, seed=11)
        b = split_edges(graph, 0.1, 0.2, seed=11)
        assert np.array_equal(a.test_edges, b.test_edges)
        assert np.array_equal(a.val_nonedges, b.val_nonedges)

    def test_partition_and_nonedge_disjointness(self):
        graph = self._graph()
        split = split_edges(graph, 0.1, 0.2, seed=5)
        all_edges = graph.edge_set()
        parts = (
            split.train.edge_set()
            | set(map(tuple, split.val_edges))
            | set(map(tuple, split.test_edges))
        )
        assert parts == all_edges
        total = split.train.num_edges + len(split.val_edges) + len(split.test_edges)
        assert total == graph.num_edges
        for ne in np.vstack([split.val_nonedges, split.test_nonedges]):
            assert tuple(ne) not in all_edges and ne[0] != ne[1]

    def test_bad_fractions(self):
        graph = self._graph()
        with pytest.raises(DataError):
            split_edges(graph, 0.7, 0.5, seed=0)


class TestGraphBasics:
    def test_no_self_loops(self):
        with pytest.raises(DataError):
            AdjacencyGraph.from_pairs(3, [[1, 1]])

    def test_duplicates_collapse_and_orientation(self):
        graph = AdjacencyGraph.from_pairs(4, [[2, 0], [0, 2], [3, 1]])
        assert graph.num_edges == 2
        assert np.all(graph.edges[:, 0] < graph.edges[:, 1])

    def test_edge_list_loader(self, tmp_path):
        path = tmp_path / "e.txt"
        path.write_text("0 1\n1 0\n2 3\n")
        graph = load_edge_list(str(path))
        assert graph.num_edges == 2 and graph.num_nodes == 4

    def test_subgraph_relabels(self):
        graph = AdjacencyGraph.from_pairs(5, [[0, 1], [1, 4], [2, 3]])
        sub = graph.subgraph(np.array([1, 3, 4]))
        assert sub.num_nodes == 3
        assert sub.edge_set() == {(0, 2)}  # the 1-4 edge in local indices


class TestStandardLabelSplit:
    def test_counts_and_disjointness(self):
        from graphtopics.graph_data import LabelVector

        rng = np.random.default_rng(0)
        labels = LabelVector(rng.integers(0, 3, size=200), 3)
        train, val, test = standard_label_split(labels, per_class=5, val_count=50, test_count=60)
        assert len(train) == 15 and len(val) == 50 and len(test) == 60
        assert not set(train) & set(val) and not set(val) & set(test)
        for cls in range(3):
            assert (labels.labels[train] == cls).sum() == 5
