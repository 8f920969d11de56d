"""Frozen-backbone model state and the forward math from patch features to class scores.

The backbone itself never enters the engine: a patch is represented by its
pre-kernel feature vector (length C), and a prototype kernel is a 1x1
convolution, i.e. a plain dot product against that vector.  One channel of
the per-location softmax is one prototypical part.  Max-pooling the
per-location softmax over a whole image gives the pooled activation vector
that the non-negative classification head consumes.

Prototype and class indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

ACTIVATION_SUM_TOL = 1e-6


@dataclass
class PatchRecord:
    """One spatial patch: feature vector plus provenance.

    activation_cache, when present, holds the per-location softmax over all
    D channels (sums to 1).
    """

    feature: np.ndarray
    image_id: str
    location: tuple[int, int]
    thumbnail_ref: str = ""
    activation_cache: np.ndarray | None = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(self.feature)):
            raise ValidationError(f"patch {self.image_id}@{self.location} has non-finite feature entries")
        if self.activation_cache is not None:
            cache = np.asarray(self.activation_cache, dtype=np.float64)
            total = float(cache.sum())
            if abs(total - 1.0) > ACTIVATION_SUM_TOL:
                raise ValidationError(f"activation_cache sums to {total}, expected 1 within {ACTIVATION_SUM_TOL}")
            self.activation_cache = cache

    def key(self) -> tuple[str, tuple[int, int]]:
        """Identity used for set disjointness: (image_id, location)."""
        return (self.image_id, self.location)


@dataclass
class PrototypeBank:
    """The model head: D prototype kernels over C feature channels plus the
    non-negative class-weight matrix (D x K)."""

    kernels: np.ndarray  # (D, C)
    head: np.ndarray  # (D, K), entrywise >= 0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels)
        self.head = np.asarray(self.head)
        if self.kernels.ndim != 2 or self.head.ndim != 2:
            raise ValidationError("kernels and head must be 2-D")
        if self.kernels.shape[0] != self.head.shape[0]:
            raise ShapeError(
                f"kernel rows ({self.kernels.shape[0]}) != head rows ({self.head.shape[0]})"
            )
        if self.kernels.shape[0] < 2:
            raise ValidationError("a bank needs at least 2 prototypes")
        if not np.all(np.isfinite(self.kernels)):
            raise ValidationError("kernel rows must be finite")
        if np.any(self.head < 0):
            raise ValidationError("head weights must be non-negative")
        if not self.class_names:
            self.class_names = [f"class_{k}" for k in range(self.head.shape[1])]

    @property
    def num_prototypes(self) -> int:
        return self.kernels.shape[0]

    @property
    def feature_width(self) -> int:
        return self.kernels.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.kernels.copy(), self.head.copy(), list(self.class_names))


def channel_logits(patch: PatchRecord, bank: PrototypeBank) -> np.ndarray:
    """Dot product of the patch feature against every prototype kernel."""
    if patch.feature.shape[0] != bank.feature_width:
        raise ShapeError(
            f"feature length {patch.feature.shape[0]} != kernel width {bank.feature_width}"
        )
    return bank.kernels.astype(np.float64, copy=False) @ patch.feature


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-location softmax over the channel dimension.

    Shift-invariant (max is subtracted before exponentiation); output sums
    to 1 within 1e-9.  Non-finite input is rejected.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("softmax input must be finite")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def pool_activations(per_location: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Coordinatewise max over per-location activation vectors."""
    if len(per_location) == 0:
        raise ValidationError("cannot pool an empty list of activations")
    stacked = np.asarray(per_location, dtype=np.float64)
    return stacked.max(axis=0)


def classify(pooled: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Class scores: pooled activations through the non-negative head."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape[0] != bank.num_prototypes:
        raise ShapeError(
            f"activation length {pooled.shape[0]} != head rows {bank.num_prototypes}"
        )
    return pooled @ bank.head.astype(np.float64, copy=False)


def activation_matrix(features: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Per-location softmax for a whole corpus at once.

    features: (N, C), kernels: (D, C).  Returns (N, D) with rows summing to 1.
    """
    features = np.asarray(features, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if features.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"feature width {features.shape[1]} != kernel width {kernels.shape[1]}"
        )
    logits = features @ kernels.T
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def corpus_activations(corpus: list[PatchRecord], bank: PrototypeBank) -> np.ndarray:
    """Activation matrix for a list of patches, filling activation_cache lazily.

    Cached vectors are reused only when their length matches the bank and a
    sentinel patch's cache reproduces under the bank's kernels; a split
    extends D, but a bank with the same width and different kernels would
    otherwise silently serve stale values.
    """
    D = bank.num_prototypes
    cached = [
        p.activation_cache is not None and p.activation_cache.shape[0] == D for p in corpus
    ]
    if all(cached):
        sentinel = activation_matrix(corpus[0].feature[None, :], bank.kernels)[0]
        if np.allclose(sentinel, corpus[0].activation_cache, atol=1e-6):
            return np.stack([p.activation_cache for p in corpus])
    feats = np.stack([p.feature for p in corpus])
    acts = activation_matrix(feats, bank.kernels)
    for patch, row in zip(corpus, acts):
        patch.activation_cache = row
    return acts


def pooled_by_image(corpus: list[PatchRecord], bank: PrototypeBank) -> dict[str, np.ndarray]:
    """Pooled activation vector per image, in corpus order of first appearance."""
    acts = corpus_activations(corpus, bank)
    pooled: dict[str, np.ndarray] = {}
    for patch, row in zip(corpus, acts):
        prev = pooled.get(patch.image_id)
        pooled[patch.image_id] = row if prev is None else np.maximum(prev, row)
    return pooled
