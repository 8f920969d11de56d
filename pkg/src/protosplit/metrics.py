"""Purity metrics over ground-truth part labels, plus plain head accuracy.

Pattern purity treats each patch's full part combination as one pattern and
scores 1/k for k distinct patterns; part purity is the appearance fraction
of the single most repeated part.  Both depend only on label sets, never on
activation values.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import PrototypeBank, classify


@dataclass(frozen=True)
class PartAnnotation:
    """Ground-truth part labels overlapping one patch."""

    image_id: str
    location: tuple[int, int]
    parts: frozenset[str]

    def __post_init__(self):
        if not self.parts:
            raise ValidationError("an annotated patch needs at least one part label")


def pattern_purity(patch_patterns: list[frozenset[str]] | list[set[str]]) -> float:
    """1/k where k counts distinct part combinations (set equality)."""
    if not patch_patterns:
        raise ValidationError("pattern_purity needs at least one patch")
    distinct = {frozenset(p) for p in patch_patterns}
    return 1.0 / len(distinct)


def part_purity(patch_parts: list[frozenset[str]] | list[set[str]]) -> float:
    """Appearance fraction of the most repeated part label."""
    if not patch_parts:
        raise ValidationError("part_purity needs at least one patch")
    counts = Counter()
    for parts in patch_parts:
        for label in set(parts):
            counts[label] += 1
    return max(counts.values()) / len(patch_parts)


def accuracy(bank: PrototypeBank, samples: list[tuple[np.ndarray, int]]) -> float:
    """Fraction of pooled-activation samples whose top class score matches the
    label; argmax ties resolve to the smaller class index."""
    if not samples:
        raise ValidationError("accuracy needs a non-empty evaluation set")
    correct = 0
    for pooled, label in samples:
        scores = classify(np.asarray(pooled, dtype=np.float64), bank)
        if int(np.argmax(scores)) == int(label):
            correct += 1
    return correct / len(samples)
