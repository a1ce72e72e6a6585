"""Label embeddings averaged over a pool of prompt templates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .numerics import Tensor, check_finite


class EmptyBankError(ValueError):
    pass


@dataclass
class TemplateEmbeddingBank:
    """Precomputed text-encoder outputs, one ``n_labels x d`` slice per
    template. Template strings are carried along but never interpreted."""

    embeddings: Sequence[Tensor]
    label_names: List[str]
    templates: List[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.embeddings)


@dataclass
class LabelEmbeddingTable:
    vectors: Tensor
    seen_mask: np.ndarray
    label_names: List[str]

    def __post_init__(self):
        self.seen_mask = np.asarray(self.seen_mask, dtype=bool)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.seen_mask.size:
            raise ValueError(
                f"table has {self.vectors.shape} vectors but "
                f"{self.seen_mask.size} seen/unseen flags"
            )
        if len(self.label_names) != self.seen_mask.size:
            raise ValueError("label_names length does not match vectors")

    @property
    def n_labels(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def seen(self) -> np.ndarray:
        return np.flatnonzero(self.seen_mask)

    @property
    def unseen(self) -> np.ndarray:
        return np.flatnonzero(~self.seen_mask)

    def astype(self, dtype) -> "LabelEmbeddingTable":
        return LabelEmbeddingTable(
            self.vectors.astype(dtype), self.seen_mask.copy(), list(self.label_names)
        )


def combine_templates(bank: TemplateEmbeddingBank, seen_mask=None) -> LabelEmbeddingTable:
    """Unweighted mean over the template axis.

    No normalization is applied afterwards; downstream scores use raw inner
    products, so the table keeps whatever magnitude the encoder produced.
    """
    if bank.K == 0:
        raise EmptyBankError("template bank is empty")
    first = np.asarray(bank.embeddings[0])
    n, d = first.shape
    if n != len(bank.label_names):
        raise ValueError(f"{n} embedding rows for {len(bank.label_names)} labels")
    for k, e in enumerate(bank.embeddings):
        e = np.asarray(e)
        if e.shape != (n, d):
            raise ValueError(f"template {k} has shape {e.shape}, expected {(n, d)}")
        check_finite(e, f"template {k} embeddings")
    stack = np.stack([np.asarray(e, dtype=np.float64) for e in bank.embeddings])
    # sorting along the template axis makes the sum independent of template order
    acc = np.sort(stack, axis=0).sum(axis=0)
    vectors = (acc / bank.K).astype(first.dtype)
    if seen_mask is None:
        seen_mask = np.ones(n, dtype=bool)
    return LabelEmbeddingTable(vectors, seen_mask, list(bank.label_names))
