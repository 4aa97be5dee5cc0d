"""Re-identification, FID, Visual-DNA EMD and downstream AUC metrics.

Every metric works on plain arrays; the dataset protocols take embedder and
detector adapters so real models can replace the toy ones.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .attributes import ToyFaceEmbedder, detect_faces, resize_crop
from .embeddings import EmbeddingSet, l2_normalize
from .errors import ContractViolation, ProtocolError, UndefinedMetricError

RANKS = (1, 5, 10)
DNA_BINS = 64
FID_EPS = 1e-6


@dataclass
class ReIDReport:
    reid_at: dict
    map_score: float
    protocol: str = "unspecified"
    n_queries: int = 0
    n_excluded: int = 0
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reid_at"] = {str(k): v for k, v in self.reid_at.items()}
        return d


class Gallery:
    """Unit-normalised gallery with precomputed id order for tie-breaking."""

    def __init__(self, gallery: EmbeddingSet):
        self.ids = gallery.ids
        self.unit = l2_normalize(gallery.vectors)
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))
        self._index = {i: k for k, i in enumerate(self.ids)}

    def distances(self, query) -> np.ndarray:
        q = l2_normalize(np.asarray(query, dtype=np.float64))
        if q.shape != (self.unit.shape[1],):
            raise ContractViolation(f"query dim {q.shape} does not match gallery dim {self.unit.shape[1]}")
        return 1.0 - self.unit @ q

    def rank(self, query, true_id) -> int:
        if true_id not in self._index:
            raise ProtocolError(f"true id {true_id!r} not in gallery")
        return int(kernels.rank_of(self.distances(query), self.id_rank, self._index[true_id]))


def knn_rank(query, gallery: EmbeddingSet, true_id: str) -> int:
    """1-based position of ``true_id`` when the gallery is sorted by cosine distance to ``query``.

    Equal distances are ordered by id.
    """
    return Gallery(gallery).rank(query, true_id)


def reid_report(ranks, protocol: str = "unspecified", excluded=()) -> ReIDReport:
    """Re-ID@K for K in (1, 5, 10) and mAP (mean reciprocal rank, one relevant item per query)."""
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise UndefinedMetricError("no ranks to report on")
    if np.any(r < 1):
        raise ContractViolation("ranks are 1-based")
    reid_at = {k: float(np.count_nonzero(r <= k)) / r.size for k in RANKS}
    map_score = float(np.mean(1.0 / r))
    excluded = list(excluded)
    return ReIDReport(reid_at, map_score, protocol, int(r.size), len(excluded), excluded)


def _retrieval(real: EmbeddingSet, anon: EmbeddingSet, protocol: str, excluded: list) -> ReIDReport:
    gallery = Gallery(real)
    ranks = []
    for qid, vec in zip(anon.ids, anon.vectors):
        if qid not in gallery._index:
            excluded.append(qid)
            continue
        ranks.append(gallery.rank(vec, qid))
    return reid_report(ranks, protocol, sorted(set(excluded)))


def _largest_face_embeddings(images: dict, detector, embedder, excluded: list):
    ids, vecs = [], []
    for key in sorted(images):
        img = np.asarray(images[key])
        faces = detect_faces(img, detector)
        if not faces:
            excluded.append(key)
            continue
        x0, y0, x1, y1 = (int(round(v)) for v in faces[0].bbox)
        ids.append(key)
        vecs.append(embedder(img[y0:y1, x0:x1]))
    return ids, vecs


def face_level_protocol(real_images: dict, anon_images: dict, face_detector, face_embedder) -> ReIDReport:
    """Largest-face crop retrieval of each anonymised image against the real set.

    Images whose face cannot be detected (on either side) are excluded and
    listed in the report.
    """
    excluded = sorted(set(real_images) ^ set(anon_images))
    shared = {k for k in real_images if k in anon_images}
    real_ids, real_vecs = _largest_face_embeddings({k: real_images[k] for k in shared}, face_detector,
                                                   face_embedder, excluded)
    anon_ids, anon_vecs = _largest_face_embeddings({k: anon_images[k] for k in shared}, face_detector,
                                                   face_embedder, excluded)
    if not real_ids or not anon_ids:
        raise UndefinedMetricError("no detectable faces on one side of the protocol")
    real = EmbeddingSet(tuple(real_ids), np.stack(real_vecs), "face")
    anon = EmbeddingSet(tuple(anon_ids), np.stack(anon_vecs), "face")
    return _retrieval(real, anon, "face_level", excluded)


def image_level_protocol(real_images: dict, anon_images: dict, whole_image_embedder) -> ReIDReport:
    excluded = sorted(set(real_images) ^ set(anon_images))
    shared = sorted(k for k in real_images if k in anon_images)
    if not shared:
        raise UndefinedMetricError("no paired images")
    real = EmbeddingSet(tuple(shared), np.stack([whole_image_embedder(real_images[k]) for k in shared]), "image")
    anon = EmbeddingSet(tuple(shared), np.stack([whole_image_embedder(anon_images[k]) for k in shared]), "image")
    return _retrieval(real, anon, "image_level", excluded)


def embedding_protocol(real: EmbeddingSet, anon: EmbeddingSet, protocol: str = "embedding") -> ReIDReport:
    """Retrieval on precomputed embeddings; unpaired ids are excluded."""
    excluded = sorted(set(real.ids) ^ set(anon.ids))
    return _retrieval(real, anon, protocol, excluded)


class ToyImageEmbedder(ToyFaceEmbedder):
    """Whole-image embedder: the crop projection applied to the full frame.

    Centred on mid-grey rather than the frame mean, so flat frames still
    embed to a non-zero vector.
    """

    def __call__(self, image) -> np.ndarray:
        return self.proj @ (resize_crop(image).ravel() / 255.0 - 0.5)


def _covariance(x: np.ndarray, eps: float) -> np.ndarray:
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return cov + eps * np.eye(cov.shape[0])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real_feats, anon_feats, eps: float = FID_EPS) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    The trace of ``(S1 S2)^(1/2)`` is taken as the trace of the PSD root of
    ``S1^(1/2) S2 S1^(1/2)``, which is symmetric and has the same spectrum.
    """
    a = np.asarray(real_feats, dtype=np.float64)
    b = np.asarray(anon_feats, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ContractViolation(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise UndefinedMetricError("need at least two samples per set")
    s1 = _covariance(a, eps)
    s2 = _covariance(b, eps)
    root1 = _sqrtm_psd(s1)
    middle = root1 @ s2 @ root1
    vals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean(axis=0) - b.mean(axis=0)
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(value, 0.0)


@dataclass(frozen=True, eq=False)
class LayerHistogram:
    edges: np.ndarray   # (bins + 1,), uniform
    counts: np.ndarray  # (neurons, bins)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.ndim != 2 or counts.shape[1] != edges.size - 1:
            raise ContractViolation(f"edges {edges.shape} inconsistent with counts {counts.shape}")
        if np.any(counts < 0):
            raise ContractViolation("histogram counts must be non-negative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def bin_width(self) -> float:
        widths = np.diff(self.edges)
        if not np.allclose(widths, widths[0], rtol=1e-9, atol=0):
            raise ContractViolation("Visual DNA histograms need uniform bins")
        return float(widths[0])


@dataclass(frozen=True)
class ActivationHistogramSet:
    layers: tuple

    def __len__(self):
        return len(self.layers)


def layer_edges(activation_sets, bins: int = DNA_BINS) -> list:
    """Uniform edges per layer spanning the range observed over all given images.

    ``activation_sets`` is a list (one per image) of lists of per-layer
    ``(samples, neurons)`` arrays.
    """
    n_layers = len(activation_sets[0])
    edges = []
    for li in range(n_layers):
        lo = min(float(np.min(s[li])) for s in activation_sets)
        hi = max(float(np.max(s[li])) for s in activation_sets)
        if hi <= lo:
            hi = lo + 1.0
        edges.append(np.linspace(lo, hi, bins + 1))
    return edges


def activation_histograms(layer_activations, edges) -> ActivationHistogramSet:
    layers = []
    for acts, e in zip(layer_activations, edges):
        acts = np.asarray(acts, dtype=np.float64)
        bins = e.size - 1
        width = e[1] - e[0]
        idx = np.clip(np.floor((acts - e[0]) / width).astype(np.int64), 0, bins - 1)
        counts = np.zeros((acts.shape[1], bins))
        for j in range(acts.shape[1]):
            counts[j] = np.bincount(idx[:, j], minlength=bins)
        layers.append(LayerHistogram(e, counts))
    return ActivationHistogramSet(tuple(layers))


def _normalized(counts):
    mass = counts.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        raise ContractViolation("histogram with zero mass")
    return counts / mass


def visual_dna_pair(real_hist: ActivationHistogramSet, anon_hist: ActivationHistogramSet) -> float:
    """Mean over layers of the mean per-neuron 1-D EMD between two images' histograms."""
    if len(real_hist) != len(anon_hist) or len(real_hist) == 0:
        raise ContractViolation("histogram sets have different layer counts")
    per_layer = []
    for a, b in zip(real_hist.layers, anon_hist.layers):
        if a.counts.shape != b.counts.shape or not np.array_equal(a.edges, b.edges):
            raise ContractViolation("layer structure or bin edges differ")
        emd = kernels.emd_rows(_normalized(a.counts), _normalized(b.counts), a.bin_width)
        per_layer.append(float(np.mean(emd)))
    return float(np.mean(per_layer))


class ToyActivationModel:
    """Two ReLU layers over 8x8 patches; each patch position is one activation sample."""

    shareable = True

    def __init__(self, seed: int = 0, widths=(32, 16)):
        rng = np.random.default_rng([seed, 17])
        self.w1 = rng.standard_normal((8 * 8 * 3, widths[0])) / math.sqrt(8 * 8 * 3)
        self.w2 = rng.standard_normal((widths[0], widths[1])) / math.sqrt(widths[0])

    def __call__(self, image) -> list:
        img = np.asarray(image, dtype=np.float64) / 255.0
        H, W = img.shape[:2]
        H8, W8 = H - H % 8, W - W % 8
        if H8 == 0 or W8 == 0:
            img = resize_crop(img * 255.0, 16) / 255.0
            H8 = W8 = 16
        patches = img[:H8, :W8].reshape(H8 // 8, 8, W8 // 8, 8, 3).transpose(0, 2, 1, 3, 4).reshape(-1, 192)
        l1 = np.maximum(patches @ self.w1, 0.0)
        l2 = np.maximum(l1 @ self.w2, 0.0)
        return [l1, l2]


def visual_dna_images(real_image, anon_image, model, bins: int = DNA_BINS) -> float:
    ra = model(real_image)
    aa = model(anon_image)
    edges = layer_edges([ra, aa], bins)
    return visual_dna_pair(activation_histograms(ra, edges), activation_histograms(aa, edges))


def dataset_dna_report(pairs) -> tuple[float, float]:
    """Population mean and standard deviation of per-pair distances."""
    v = np.asarray(pairs, dtype=np.float64)
    if v.size == 0:
        raise UndefinedMetricError("no distances")
    return float(v.mean()), float(v.std(ddof=0))


def downstream_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractViolation("scores and labels must be matching 1-D sequences")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    return float(kernels.auc_numerator(s, y) / (2.0 * n_pos * n_neg))


PROTOCOL_COLUMNS = {
    "face_level": "Face-level (VGGFace2-style)",
    "image_level": "Image-level (CLIP-style)",
}


def reid_table(rows: dict, metric: str = "reid@1") -> str:
    """Plain-text table, one row per method, one column per protocol.

    ``rows`` maps a method name to ``{protocol: ReIDReport}``; ``metric`` is
    ``reid@K`` or ``map``.
    """
    cols = list(PROTOCOL_COLUMNS)
    header = ["Method"] + [PROTOCOL_COLUMNS[c] for c in cols]
    body = []
    for name, reports in rows.items():
        cells = [name]
        for c in cols:
            rep = reports.get(c)
            if rep is None:
                cells.append("-")
            elif metric == "map":
                cells.append(f"{rep.map_score:.3f}")
            else:
                cells.append(f"{rep.reid_at[int(metric.split('@')[1])]:.3f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines)


def quality_table(rows: dict) -> str:
    """``rows`` maps method to ``{"fid": float, "dna": (mean, std)}``."""
    lines = [f"{'Method':<20} | {'FID':>10} | {'Visual DNA (EMD)':>18}", "-" * 54]
    for name, r in rows.items():
        fid_s = f"{r['fid']:.3f}" if r.get("fid") is not None else "-"
        dna = r.get("dna")
        dna_s = f"{dna[0]:.4f} ± {dna[1]:.4f}" if dna is not None else "-"
        lines.append(f"{name:<20} | {fid_s:>10} | {dna_s:>18}")
    return "\n".join(lines)
