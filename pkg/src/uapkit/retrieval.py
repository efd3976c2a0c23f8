"""Retrieval-side evaluation: indicator function, candidate selection, R@k,
and top-k classification accuracy over unit-norm embeddings.

Similarity is the dot product of unit vectors (= cosine). Inputs are
validated unit-norm instead of silently renormalized. All rankings break
ties deterministically toward the smallest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_tensor
from .errors import CorruptDatasetError, InvalidArgumentError

_ROW_NORM_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingIndex:
    """A gallery of M unit-norm d-dimensional embeddings."""

    embeddings: np.ndarray  # (M, d)

    def __post_init__(self):
        e = as_tensor(self.embeddings)
        if e.ndim != 2 or e.shape[0] < 1:
            raise InvalidArgumentError("embeddings must be a nonempty (M, d) matrix")
        norms = np.linalg.norm(e, axis=1)
        if np.any(np.abs(norms - 1.0) > _ROW_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise InvalidArgumentError(f"rows must be unit-norm (worst deviation {worst:.2e})")
        object.__setattr__(self, "embeddings", e)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class MatchAnnotation:
    """Bidirectional image/text match structure: one image, many texts."""

    image_to_texts: dict[int, frozenset[int]]
    text_to_image: dict[int, int]

    def __post_init__(self):
        seen_texts = set()
        for v, texts in self.image_to_texts.items():
            if not texts:
                raise CorruptDatasetError(f"image {v} has no matching texts")
            for t in texts:
                if t in seen_texts:
                    raise CorruptDatasetError(f"text {t} matches more than one image")
                seen_texts.add(t)
                if self.text_to_image.get(t) != v:
                    raise CorruptDatasetError(f"inconsistent annotation for text {t}")
        if seen_texts != set(self.text_to_image):
            raise CorruptDatasetError("text_to_image and image_to_texts disagree")

    @classmethod
    def from_image_lists(cls, image_to_texts: dict[int, list[int]]) -> "MatchAnnotation":
        t2i = {t: v for v, ts in image_to_texts.items() for t in ts}
        i2t = {v: frozenset(ts) for v, ts in image_to_texts.items()}
        return cls(i2t, t2i)


def ranked_indices(query: np.ndarray, index: EmbeddingIndex) -> np.ndarray:
    """All gallery indices by descending similarity, ties toward smaller index."""
    sims = index.embeddings @ query
    return np.lexsort((np.arange(len(index)), -sims))


def indicator(query: np.ndarray, index: EmbeddingIndex, matches, k: int) -> int:
    """1 iff any matched index survives in the top-k retrieval results."""
    matches = set(matches)
    if not matches:
        raise InvalidArgumentError("matches must be nonempty")
    if not 1 <= k <= len(index):
        raise InvalidArgumentError(f"k={k} outside [1, {len(index)}]")
    top = ranked_indices(query, index)[:k]
    return int(any(int(i) in matches for i in top))


def select_nonmatching_topk(query: np.ndarray, index: EmbeddingIndex,
                            matches, k: int) -> list[int]:
    """The k most-similar gallery indices excluding matches, descending."""
    matches = set(matches)
    if k > len(index) - len(matches):
        raise InvalidArgumentError("not enough non-matching candidates")
    out = []
    for i in ranked_indices(query, index):
        if int(i) not in matches:
            out.append(int(i))
            if len(out) == k:
                break
    return out


def recall_at_k(queries: EmbeddingIndex, gallery: EmbeddingIndex,
                matches_per_query, k: int) -> float:
    """Mean indicator over queries."""
    if len(matches_per_query) != len(queries):
        raise InvalidArgumentError("one match set per query required")
    hits = sum(indicator(queries.embeddings[i], gallery, matches_per_query[i], k)
               for i in range(len(queries)))
    return hits / len(queries)


def topk_class_accuracy(image_embeddings: EmbeddingIndex,
                        class_prototypes: EmbeddingIndex,
                        labels, k: int) -> float:
    """Fraction of images whose true prototype ranks in the top k."""
    labels = list(labels)
    if len(labels) != len(image_embeddings):
        raise InvalidArgumentError("one label per image required")
    n_classes = len(class_prototypes)
    if any(not 0 <= int(y) < n_classes for y in labels):
        raise InvalidArgumentError("label out of range")
    hits = sum(indicator(image_embeddings.embeddings[i], class_prototypes, {int(y)}, k)
               for i, y in enumerate(labels))
    return hits / len(labels)
