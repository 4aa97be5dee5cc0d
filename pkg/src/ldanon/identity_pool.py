"""Synthetic identity pool and minimum-distance identity swap.

Distances are Euclidean between L2-normalised embeddings, i.e.
``sqrt(2 - 2 cos theta)``, so a fixed threshold means the same thing for any
embedder scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .embeddings import EmbeddingSet, l2_normalize, load_embeddings, save_embeddings
from .errors import ContractViolation, NoCandidateError

MIN_SWAP_DISTANCE = 1.0
POOL_KIND = "identity_pool"


@dataclass(frozen=True, eq=False)
class IdentityPool:
    ids: tuple
    embeddings: np.ndarray = field(repr=False)  # rows are unit length
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[order] = np.arange(len(self.ids))
        object.__setattr__(self, "_id_rank", rank)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class SwapResult:
    query_id: str
    chosen_id: str
    distance: float


def build_pool(embeddings: EmbeddingSet, metadata: dict | None = None) -> IdentityPool:
    """Validate and normalise an embedding set into a pool.

    Duplicate ids and zero rows are rejected (``EmbeddingSet`` already refuses
    duplicates and non-finite rows).
    """
    norms = np.linalg.norm(embeddings.vectors, axis=1)
    zero = [embeddings.ids[i] for i in np.flatnonzero(norms == 0)]
    if zero:
        raise ContractViolation(f"zero embedding for ids {zero[:5]}")
    # held at float32 precision so the pool file round-trips exactly
    unit = l2_normalize(embeddings.vectors).astype(np.float32).astype(np.float64)
    unit.setflags(write=False)
    meta = {"provider": embeddings.provider}
    meta.update(metadata or {})
    return IdentityPool(embeddings.ids, unit, meta)


def swap_distances(query, pool: IdentityPool) -> np.ndarray:
    q = l2_normalize(np.asarray(query, dtype=np.float64))
    if q.shape != (pool.dim,):
        raise ContractViolation(f"query dim {q.shape} does not match pool dim {pool.dim}")
    return np.sqrt(((pool.embeddings - q) ** 2).sum(axis=1))


def find_swap(query, pool: IdentityPool, min_dist: float = MIN_SWAP_DISTANCE, query_id: str = "") -> SwapResult:
    """Closest pool identity that is at least ``min_dist`` away from ``query``.

    Ties are broken by the lexicographically smallest id. Raises
    ``NoCandidateError`` when every member is closer than ``min_dist``.
    """
    if len(pool) == 0:
        raise ContractViolation("identity pool is empty")
    dists = swap_distances(query, pool)
    idx = kernels.constrained_argmin(dists, pool._id_rank, float(min_dist))
    if idx < 0:
        raise NoCandidateError(f"no pool identity at distance >= {min_dist} (max {dists.max():.4f})")
    return SwapResult(query_id, pool.ids[idx], float(dists[idx]))


def farthest_member(query, pool: IdentityPool, query_id: str = "") -> SwapResult:
    """Fallback when no member clears the threshold: the most distant identity."""
    dists = swap_distances(query, pool)
    best = dists.max()
    tied = np.flatnonzero(dists == best)
    idx = int(tied[np.argmin(pool._id_rank[tied])])
    return SwapResult(query_id, pool.ids[idx], float(dists[idx]))


def assemble_conditioning(original_embed, swapped_embed, mode: str = "pair") -> np.ndarray:
    """Image-prompt tokens for one face: ``[original, swapped]``.

    ``mode="mean"`` collapses the pair to their average as a single token.
    """
    a = np.asarray(original_embed, dtype=np.float64)
    b = np.asarray(swapped_embed, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ContractViolation(f"embedding shapes differ: {a.shape} vs {b.shape}")
    if mode == "pair":
        return np.stack([a, b])
    if mode == "mean":
        return ((a + b) / 2.0)[None]
    raise ContractViolation(f"unknown conditioning mode {mode!r}")


def save_pool(path, pool: IdentityPool):
    emb = EmbeddingSet(pool.ids, pool.embeddings, pool.metadata.get("provider", "unknown"))
    extra = {"metadata": {k: v for k, v in pool.metadata.items() if k != "provider"}}
    save_embeddings(path, emb, kind=POOL_KIND, normalized=True, extra=extra)


def load_pool(path) -> IdentityPool:
    emb, meta = load_embeddings(path)
    if meta.get("kind") != POOL_KIND:
        raise ContractViolation(f"{path} is not an identity pool file")
    metadata = {"provider": emb.provider}
    metadata.update(meta.get("metadata") or {})
    if not meta.get("normalized"):
        return build_pool(emb, metadata)
    if np.any(np.linalg.norm(emb.vectors, axis=1) == 0):
        raise ContractViolation(f"{path} contains zero rows")
    vecs = emb.vectors.copy()
    vecs.setflags(write=False)
    return IdentityPool(emb.ids, vecs, metadata)
