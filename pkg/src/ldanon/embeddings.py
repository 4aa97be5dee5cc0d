"""Id-indexed embedding collections and their on-disk form."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .errors import ContractViolation

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    ids: tuple
    vectors: np.ndarray = field(repr=False)
    provider: str = "unknown"

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        vecs = np.array(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(ids):
            raise ContractViolation(f"need one row per id: {len(ids)} ids, vectors {vecs.shape}")
        if len(ids) == 0:
            raise ContractViolation("embedding set is empty")
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ContractViolation(f"duplicate ids: {dup[:5]}")
        if not np.all(np.isfinite(vecs)):
            bad = [ids[i] for i in np.flatnonzero(~np.isfinite(vecs).all(axis=1))]
            raise ContractViolation(f"non-finite embedding for ids {bad[:5]}")
        vecs.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vecs)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, id_) -> int:
        try:
            return self.ids.index(id_)
        except ValueError:
            raise KeyError(id_) from None

    def subset(self, ids) -> "EmbeddingSet":
        rows = [self.index(i) for i in ids]
        return EmbeddingSet(tuple(ids), self.vectors[rows], self.provider)


def l2_normalize(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ContractViolation("cannot normalise a zero vector")
    return v / norms


def content_hash(ids, vectors) -> str:
    h = hashlib.sha256()
    h.update("\n".join(ids).encode("utf-8"))
    h.update(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    return h.hexdigest()


def save_embeddings(path, emb: EmbeddingSet, kind: str = "embeddings", normalized: bool = False,
                    extra: dict | None = None):
    meta = {
        "kind": kind,
        "version": FORMAT_VERSION,
        "ids": list(emb.ids),
        "dimension": emb.dim,
        "normalized": bool(normalized),
        "provider": emb.provider,
        "source_hash": content_hash(emb.ids, emb.vectors),
    }
    meta.update(extra or {})
    binfmt.save(path, {"embeddings": emb.vectors}, meta)


def load_embeddings(path) -> tuple[EmbeddingSet, dict]:
    arrays, meta = binfmt.load(path)
    if meta.get("version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported embedding file version {meta.get('version')!r}")
    vecs = arrays["embeddings"].astype(np.float64)
    return EmbeddingSet(tuple(meta["ids"]), vecs, meta.get("provider", "unknown")), meta
