"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest -m acceptance -s`` to see the summary lines.
"""
import functools
import itertools
import time

import numpy as np
import pytest
from scipy import stats

import ldanon.pipeline as pl
from ldanon.attributes import encode_attribute_map
from ldanon.embeddings import EmbeddingSet, l2_normalize
from ldanon.errors import NoCandidateError
from ldanon.evaluation import (
    ActivationHistogramSet,
    LayerHistogram,
    downstream_auc,
    embedding_protocol,
    fid,
    reid_report,
    visual_dna_pair,
)
from ldanon.fixtures import make_fixture
from ldanon.guidance import compute_guidance_weights
from ldanon.identity_pool import build_pool, find_swap
from ldanon.pipeline import PipelineConfig, anonymize_base, anonymize_light, run_batch, toy_adapters

from test_attributes import brute_force_map, make_face

pytestmark = pytest.mark.acceptance

RES = 64
FIXTURES = ("blank", "background", "one_face", "two_faces", "scene")


def criterion(number, title, budget=None):
    """Print one PASS/FAIL line for the wrapped check; enforce the runtime budget in seconds."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - t0
                if budget is not None:
                    assert elapsed < budget, f"took {elapsed:.2f} s, budget {budget} s"
            except BaseException as exc:
                print(f"\nFAIL criterion {number:2d}: {title} ({exc!r:.200})")
                raise
            print(f"\nPASS criterion {number:2d}: {title} ({elapsed:.2f} s)")
        return run
    return wrap


@criterion(1, "guidance weights sum to one and match pinned triples", budget=1.0)
def test_c01_weight_algebra():
    r = np.random.default_rng(1)
    for a_s, omega in zip(r.uniform(0, 5, 10_000), r.uniform(0, 20, 10_000)):
        w = compute_guidance_weights(float(a_s), float(omega))
        assert abs(w.w0 + w.w1 + w.w2 - 1.0) <= 1e-12
    pinned = {0.0: (1.0, 0.0, 0.0), 1.0: (0.0, -6.5, 7.5), 1.25: (-0.25, -6.5, 7.75)}
    for a_s, triple in pinned.items():
        assert compute_guidance_weights(a_s, 7.5).as_tuple() == triple


@criterion(2, "a_s = 0 reproduces the autoencoder round trip", budget=10.0)
def test_c02_reconstruction_limit():
    adapters = toy_adapters(0)
    cfg = PipelineConfig.for_variant("base", a_s=0.0, resolution=RES)
    images = [make_fixture(name, (RES, RES), seed=s) for name in FIXTURES for s in (0, 1)]
    assert len(images) == 10
    for i, img in enumerate(images):
        out, _ = anonymize_base(img, cfg, adapters, seed=i)
        ref = adapters.autoencoder.decode(adapters.autoencoder.encode(img.astype(np.float64)))
        np.testing.assert_allclose(out, np.asarray(ref), rtol=0, atol=1e-6)


@criterion(3, "lineart present at steps 0-7 and absent at 8-15")
def test_c03_control_cutoff():
    cfg = PipelineConfig.for_variant("base", resolution=RES, steps=16, noise_strength=1.0)
    assert cfg.control_settings()["lineart"] == (0.5, 0.5)
    trace = []
    anonymize_base(make_fixture("one_face", (RES, RES)), cfg, toy_adapters(0), trace=trace)
    assert [t["step"] for t in trace] == list(range(16))
    for t in trace:
        for slot in ("positive", "negative"):
            assert ("lineart" in t["slots"][slot]) == (t["step"] < 8), (t["step"], slot)
        assert "lineart" not in t["slots"]["identity"]


def _linear_scan(q, pool, min_dist):
    """Walk every member, keeping the best (distance, id) at or above the threshold."""
    q = l2_normalize(q)  # the library normalises every query on entry
    best = None
    for pid, row in zip(pool.ids, pool.embeddings):
        d = float(np.sqrt(((row - q) ** 2).sum()))
        if d >= min_dist and (best is None or (d, pid) < best):
            best = (d, pid)
    return best


def _pool_around(q, n, r):
    """Members at chord distances straddling 1.0 from unit query ``q``."""
    d = r.uniform(0.05, 1.9, n)
    u = r.standard_normal((n, q.size))
    u -= (u @ q)[:, None] * q
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cos = 1 - d * d / 2
    rows = cos[:, None] * q + np.sqrt(1 - cos * cos)[:, None] * u
    ids = tuple(f"p{i:05d}" for i in r.permutation(n))
    return build_pool(EmbeddingSet(ids, rows * r.uniform(0.5, 3.0, (n, 1))))


@criterion(4, "find_swap equals the exhaustive scan on 1,000 pools", budget=30.0)
def test_c04_swap_oracle():
    r = np.random.default_rng(4)
    for _ in range(1000):
        n = int(r.integers(1, 1001))
        q = l2_normalize(r.standard_normal(64))
        pool = _pool_around(q, n, r)
        want = _linear_scan(q, pool, 1.0)
        if want is None:
            with pytest.raises(NoCandidateError):
                find_swap(q, pool)
            continue
        got = find_swap(q, pool)
        assert (got.distance, got.chosen_id) == want
        assert got.distance >= 1.0
    q = l2_normalize(r.standard_normal(64))
    with pytest.raises(NoCandidateError):
        find_swap(q, _pool_around(q, 50, r), min_dist=2.5)


@criterion(5, "attribute map matches brute force and is 41 channels in every run")
def test_c05_attribute_map(monkeypatch):
    empty = encode_attribute_map([], (64, 64), (8, 8))
    assert empty.shape == (41, 8, 8) and not empty.any()

    one_hot = np.zeros(40)
    one_hot[7] = 1.0
    full = make_face((0, 0, 64, 64), one_hot)
    two = [make_face((0, 0, 24, 32), seed=1), make_face((40, 24, 64, 64), seed=2)]
    for faces in ([], [full], two):
        got = encode_attribute_map(faces, (64, 64), (8, 8))
        np.testing.assert_array_equal(got, brute_force_map(faces, (64, 64), (8, 8)))
    m = encode_attribute_map([full], (64, 64), (8, 8))
    assert np.all(m[7] == 1.0) and not m[np.r_[0:7, 8:40]].any()

    shapes = []
    real = pl.encode_attribute_map

    def spy(*args, **kwargs):
        out = real(*args, **kwargs)
        shapes.append(out.shape)
        return out
    monkeypatch.setattr(pl, "encode_attribute_map", spy)
    r = np.random.default_rng(5)
    pool = build_pool(EmbeddingSet(tuple(f"s{i}" for i in range(200)), r.standard_normal((200, 512))))
    cfg = PipelineConfig.for_variant("light", resolution=RES)
    for i, name in enumerate(FIXTURES):
        _, record = anonymize_light(make_fixture(name, (RES, RES), seed=i), cfg, toy_adapters(0, pool))
        assert record["attribute_map_shape"][0] == 41
    assert len(shapes) == len(FIXTURES) and all(s[0] == 41 for s in shapes)


@criterion(6, "Re-ID@K and mAP pinned values, self-retrieval and null model")
def test_c06_retrieval_metrics():
    rep = reid_report([1, 2, 4])
    assert abs(rep.reid_at[1] - 1 / 3) <= 1e-9
    assert rep.reid_at[5] == 1.0
    assert abs(rep.map_score - 0.58333333333) <= 1e-9

    r = np.random.default_rng(6)
    ids = tuple(f"p{i}" for i in range(40))
    emb = EmbeddingSet(ids, r.standard_normal((40, 32)))
    assert embedding_protocol(emb, emb).reid_at[1] == 1.0

    n, reps, hits = 100, 50, 0
    for _ in range(reps):
        ids = tuple(f"p{i}" for i in range(n))
        real = EmbeddingSet(ids, r.standard_normal((n, 64)))
        anon = EmbeddingSet(ids, r.standard_normal((n, 64)))
        hits += round(embedding_protocol(real, anon).reid_at[1] * n)
    lo, hi = stats.binom.interval(0.99, n * reps, 1 / n)
    assert lo <= hits <= hi, (hits, lo, hi)


@criterion(7, "FID identity, Gaussian closed form and symmetry", budget=20.0)
def test_c07_fid():
    r = np.random.default_rng(7)
    x = r.standard_normal((500, 16))
    assert fid(x, x) < 1e-8
    a = r.normal(0.0, 1.0, 10_000)
    b = r.normal(1.0, 1.0, 10_000)
    assert abs(fid(a, b) - 1.0) <= 0.1
    y = r.standard_normal((400, 16)) * 1.5 + 0.3
    assert abs(fid(x, y) - fid(y, x)) <= 1e-8


def _hist(counts, edges):
    return ActivationHistogramSet((LayerHistogram(edges, np.atleast_2d(counts)),))


@criterion(8, "Visual DNA EMD identity, two-bin shift and triangle inequality")
def test_c08_visual_dna_emd():
    r = np.random.default_rng(8)
    edges = np.linspace(0, 1, 17)
    h = _hist(r.random((4, 16)) + 0.1, edges)
    assert visual_dna_pair(h, h) == 0.0
    e2 = np.array([0.0, 1.0, 2.0])
    assert visual_dna_pair(_hist([1.0, 0.0], e2), _hist([0.0, 1.0], e2)) == 1.0
    for _ in range(1000):
        a, b, c = (_hist(r.random((4, 16)), edges) for _ in range(3))
        assert visual_dna_pair(a, c) <= visual_dna_pair(a, b) + visual_dna_pair(b, c) + 1e-10


@criterion(9, "Base and Light batch runs are byte-identical across repeats", budget=60.0)
def test_c09_determinism(tmp_path):
    from PIL import Image
    src = tmp_path / "in"
    src.mkdir()
    for i, name in enumerate(FIXTURES):
        Image.fromarray(make_fixture(name, (RES, RES), seed=i)).save(src / f"{name}.png")
    r = np.random.default_rng(9)
    vecs = r.standard_normal((300, 512))
    ids = tuple(f"s{i:03d}" for i in range(300))
    for variant in ("base", "light"):
        cfg = PipelineConfig.for_variant(variant, resolution=RES, seed=123)
        outs = []
        for run in range(2):
            pool = build_pool(EmbeddingSet(ids, vecs)) if variant == "light" else None
            out = tmp_path / f"{variant}{run}"
            manifest = run_batch(src, cfg, toy_adapters(0, pool), out, workers=1 + run)
            assert manifest.summary["ok"] == 5, manifest.records
            outs.append(out)
        a, b = outs
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        files = sorted(p.name for p in (a / "images").iterdir())
        assert len(files) == 5 and files == sorted(p.name for p in (b / "images").iterdir())
        for f in files:
            assert (a / "images" / f).read_bytes() == (b / "images" / f).read_bytes()


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@criterion(10, "AUC equals the pairwise oracle and the pinned example")
def test_c10_auc_oracle():
    r = np.random.default_rng(10)
    for _ in range(500):
        n = int(r.integers(2, 51))
        s = np.round(r.random(n), int(r.integers(1, 4)))  # rounding forces ties
        y = r.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert downstream_auc(s, y) == _brute_auc(s.tolist(), y.tolist())
    assert downstream_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
