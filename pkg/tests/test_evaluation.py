import itertools

import numpy as np
import pytest
from scipy import linalg, stats

from ldanon.attributes import ToyFaceDetector, ToyFaceEmbedder
from ldanon.embeddings import EmbeddingSet
from ldanon.errors import ContractViolation, ProtocolError, UndefinedMetricError
from ldanon.evaluation import (
    ActivationHistogramSet,
    LayerHistogram,
    ReIDReport,
    ToyActivationModel,
    ToyImageEmbedder,
    activation_histograms,
    dataset_dna_report,
    downstream_auc,
    embedding_protocol,
    face_level_protocol,
    fid,
    image_level_protocol,
    knn_rank,
    layer_edges,
    reid_report,
    reid_table,
    visual_dna_images,
    visual_dna_pair,
)
from ldanon.fixtures import make_fixture


def _at_cosine_distance(d):
    theta = np.arccos(1 - d)
    return np.array([np.cos(theta), np.sin(theta)])


class TestKnnRank:
    def test_exact_match_rank_one(self):
        g = EmbeddingSet(("a", "b", "c"), np.eye(3))
        assert knn_rank(np.array([0, 1.0, 0]), g, "b") == 1

    def test_sorted_position(self):
        g = EmbeddingSet(("x", "y", "z"), np.stack([_at_cosine_distance(d) for d in (0.4, 0.2, 0.9)]))
        assert knn_rank(np.array([1.0, 0.0]), g, "x") == 2

    def test_tie_by_id(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        g = EmbeddingSet(("b", "a", "c"), v)
        assert knn_rank(np.array([1.0, 0.0]), g, "a") == 1
        assert knn_rank(np.array([1.0, 0.0]), g, "b") == 2

    def test_missing_true_id(self):
        with pytest.raises(ProtocolError):
            knn_rank(np.ones(2), EmbeddingSet(("a",), np.ones((1, 2))), "zz")

    def test_matches_sort_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 200))
            vecs = rng.standard_normal((n, 16))
            ids = tuple(f"id{i}" for i in rng.permutation(n))
            q = rng.standard_normal(16)
            t = ids[int(rng.integers(n))]
            qn = q / np.linalg.norm(q)
            dist = {i: 1 - float(v @ qn / np.linalg.norm(v)) for i, v in zip(ids, vecs)}
            order = sorted(ids, key=lambda i: (dist[i], i))
            assert knn_rank(q, EmbeddingSet(ids, vecs), t) == order.index(t) + 1


class TestReport:
    def test_pinned_ranks(self):
        r = reid_report([1, 2, 4])
        assert r.reid_at[1] == pytest.approx(1 / 3, abs=1e-12)
        assert r.reid_at[5] == 1.0 and r.reid_at[10] == 1.0
        assert r.map_score == pytest.approx(0.5833333333, abs=1e-9)

    def test_all_first(self):
        r = reid_report([1] * 7)
        assert r.map_score == 1.0 and all(v == 1.0 for v in r.reid_at.values())

    def test_all_far(self):
        assert reid_report([11, 30, 12]).reid_at[10] == 0.0

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            reid_report([])

    def test_monotone_and_map_bounds(self, rng):
        for _ in range(100):
            ranks = rng.integers(1, 30, size=int(rng.integers(1, 50)))
            r = reid_report(ranks)
            assert r.reid_at[1] <= r.reid_at[5] <= r.reid_at[10]
            assert 0 < r.map_score <= 1
            assert (r.map_score == 1.0) == bool(np.all(ranks == 1))


def _face_images(n, seed=0):
    return {f"img{i:02d}": make_fixture("one_face", (64, 64), seed=seed + i) for i in range(n)}


class TestProtocols:
    def test_face_level_self_retrieval(self):
        imgs = _face_images(8)
        rep = face_level_protocol(imgs, imgs, ToyFaceDetector(), ToyFaceEmbedder())
        assert rep.reid_at[1] == 1.0 and rep.protocol == "face_level" and rep.n_queries == 8

    def test_face_level_exclusion(self):
        imgs = _face_images(9)
        imgs["img_blank"] = make_fixture("blank", (64, 64))
        rep = face_level_protocol(imgs, imgs, ToyFaceDetector(), ToyFaceEmbedder())
        assert rep.n_queries == 9 and rep.n_excluded == 1 and rep.excluded == ["img_blank"]

    def test_image_level_self_retrieval(self):
        imgs = {f"s{i}": make_fixture("scene", (64, 64), seed=i) for i in range(10)}
        rep = image_level_protocol(imgs, imgs, ToyImageEmbedder())
        assert rep.reid_at[1] == 1.0 and rep.protocol == "image_level"

    def test_image_level_null_model(self, rng):
        # unrelated images: retrieval should look like chance and stay monotone
        real = {f"s{i}": make_fixture("scene", (64, 64), seed=i) for i in range(20)}
        anon = {f"s{i}": make_fixture("scene", (64, 64), seed=1000 + i) for i in range(20)}
        rep = image_level_protocol(real, anon, ToyImageEmbedder())
        assert rep.reid_at[1] <= rep.reid_at[5] <= rep.reid_at[10]
        assert rep.reid_at[1] < 0.5

    def test_random_embedding_null_model(self):
        r = np.random.default_rng(2024)
        n, reps = 100, 50
        hits = 0
        for _ in range(reps):
            ids = tuple(f"p{i}" for i in range(n))
            real = EmbeddingSet(ids, r.standard_normal((n, 64)))
            anon = EmbeddingSet(ids, r.standard_normal((n, 64)))
            rep = embedding_protocol(real, anon)
            hits += round(rep.reid_at[1] * n)
        lo, hi = stats.binom.interval(0.99, n * reps, 1 / n)
        assert lo <= hits <= hi


class TestFid:
    def test_identical(self, rng):
        x = rng.standard_normal((200, 8))
        assert fid(x, x) < 1e-8

    def test_gaussian_closed_form(self):
        r = np.random.default_rng(3)
        a = r.normal(0, 1, 10_000)
        b = r.normal(1, 1, 10_000)
        assert abs(fid(a, b) - 1.0) < 0.1

    def test_symmetric(self, rng):
        a = rng.standard_normal((300, 6))
        b = rng.standard_normal((250, 6)) * 1.5 + 0.3
        assert abs(fid(a, b) - fid(b, a)) < 1e-8

    def test_against_scipy_sqrtm(self, rng):
        a = rng.standard_normal((400, 5)) @ rng.standard_normal((5, 5))
        b = rng.standard_normal((300, 5)) @ rng.standard_normal((5, 5)) + 0.5
        s1 = np.cov(a, rowvar=False) + 1e-6 * np.eye(5)
        s2 = np.cov(b, rowvar=False) + 1e-6 * np.eye(5)
        cross = linalg.sqrtm(s1 @ s2).real
        mu = a.mean(0) - b.mean(0)
        expected = mu @ mu + np.trace(s1 + s2 - 2 * cross)
        assert fid(a, b) == pytest.approx(expected, rel=1e-8, abs=1e-8)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            fid(rng.standard_normal((10, 3)), rng.standard_normal((10, 4)))


def _hist_set(counts_per_layer, edges_per_layer):
    return ActivationHistogramSet(tuple(LayerHistogram(e, c) for c, e in zip(counts_per_layer, edges_per_layer)))


class TestVisualDna:
    def test_identical_zero(self, rng):
        edges = [np.linspace(0, 1, 65), np.linspace(-2, 2, 65)]
        h = _hist_set([rng.integers(0, 9, (5, 64)) + 1, rng.integers(0, 9, (3, 64)) + 1], edges)
        assert visual_dna_pair(h, h) == 0.0

    def test_two_bin_shift(self):
        e = [np.array([0.0, 1.0, 2.0])]
        a = _hist_set([np.array([[1.0, 0.0]])], e)
        b = _hist_set([np.array([[0.0, 1.0]])], e)
        assert visual_dna_pair(a, b) == 1.0

    def test_matches_scipy_wasserstein(self, rng):
        e = np.linspace(-1, 3, 33)
        centers = (e[:-1] + e[1:]) / 2
        for _ in range(50):
            p = rng.random((1, 32))
            q = rng.random((1, 32))
            got = visual_dna_pair(_hist_set([p], [e]), _hist_set([q], [e]))
            want = stats.wasserstein_distance(centers, centers, p[0], q[0])
            assert got == pytest.approx(want, rel=1e-10, abs=1e-12)

    def test_triangle_inequality(self, rng):
        e = [np.linspace(0, 1, 17)]
        for _ in range(1000):
            a, b, c = (_hist_set([rng.random((4, 16))], e) for _ in range(3))
            assert visual_dna_pair(a, c) <= visual_dna_pair(a, b) + visual_dna_pair(b, c) + 1e-10

    def test_indiscernibles(self, rng):
        e = [np.linspace(0, 1, 9)]
        p = rng.random((2, 8))
        assert visual_dna_pair(_hist_set([p], e), _hist_set([3 * p], e)) == pytest.approx(0, abs=1e-15)
        q = p.copy()
        q[0, [0, 7]] = q[0, [7, 0]] + [1, 0]
        assert visual_dna_pair(_hist_set([p], e), _hist_set([q], e)) > 0

    def test_structure_mismatch(self):
        a = _hist_set([np.ones((2, 4))], [np.linspace(0, 1, 5)])
        b = _hist_set([np.ones((2, 4))], [np.linspace(0, 2, 5)])
        with pytest.raises(ContractViolation):
            visual_dna_pair(a, b)

    def test_histograms_from_activations(self, rng):
        acts = [rng.random((100, 4))]
        edges = layer_edges([acts], bins=10)
        h = activation_histograms(acts, edges)
        assert h.layers[0].counts.shape == (4, 10)
        assert np.all(h.layers[0].counts.sum(1) == 100)

    def test_image_level_dna(self):
        model = ToyActivationModel()
        img = make_fixture("scene", (64, 64), seed=1)
        other = make_fixture("scene", (64, 64), seed=2)
        assert visual_dna_images(img, img, model) == 0.0
        assert visual_dna_images(img, other, model) > 0.0

    @pytest.mark.parametrize("values, expected", [([5, 5, 5], (5, 0)), ([0, 2], (1, 1)), ([3.5], (3.5, 0))])
    def test_dataset_report(self, values, expected):
        assert dataset_dna_report(values) == expected


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_pinned(self):
        assert downstream_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated(self):
        assert downstream_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_inverted(self, rng):
        s = rng.random(30)
        y = (rng.random(30) < 0.5).astype(int)
        y[:2] = [0, 1]
        assert downstream_auc(s, 1 - y) == pytest.approx(1 - downstream_auc(s, y), abs=1e-15)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            downstream_auc([0.1, 0.2], [1, 1])

    def test_brute_force_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(2, 51))
            s = np.round(rng.random(n), int(rng.integers(1, 4)))
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            assert downstream_auc(s, y) == brute_auc(s.tolist(), y.tolist())


def test_reid_table_columns():
    reps = {"face_level": reid_report([1, 3]), "image_level": reid_report([2, 2])}
    table = reid_table({"ours": reps})
    header = table.splitlines()[0]
    assert "Face-level (VGGFace2-style)" in header and "Image-level (CLIP-style)" in header
    assert "0.500" in table and "0.000" in table


def test_report_dict_roundtrip():
    r = reid_report([1, 2], "face_level", ["x"])
    d = r.to_dict()
    d["reid_at"] = {int(k): v for k, v in d["reid_at"].items()}
    assert ReIDReport(**d) == r
