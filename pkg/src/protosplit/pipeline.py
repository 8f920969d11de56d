"""Detect-then-split orchestration shared by the CLI and the service."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection import DetectionResult
from .errors import ValidationError
from .model import PatchRecord, PrototypeBank, pooled_by_image
from .splitting import (
    ConceptSets,
    HeadFinetuneResult,
    SplitHyperparams,
    SplitResult,
    build_reference_set,
    reinit_and_finetune_head,
    run_split,
    start_session,
)

LABEL_A = "A"
LABEL_B = "B"
LABEL_OTHER = "SomethingElse"
VALID_LABELS = (LABEL_A, LABEL_B, LABEL_OTHER)


def pooled_dataset(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    image_classes: dict[str, int],
) -> list[tuple[np.ndarray, int]]:
    """(pooled activation, class) pairs for every labeled image in the corpus."""
    pooled = pooled_by_image(corpus, bank)
    return [
        (vector, image_classes[image_id])
        for image_id, vector in pooled.items()
        if image_id in image_classes
    ]


def reference_size_for(sets_sizes: int) -> int:
    return max(20, sets_sizes)


def concept_sets_from_cliques(
    detection: DetectionResult,
    e: int,
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    reference_size: int | None = None,
) -> ConceptSets:
    """Automatic mode: the two detected cliques become the concepts."""
    s1_rows, s2_rows = detection.concept_indices(e)
    s1 = [corpus[i] for i in s1_rows]
    s2 = [corpus[i] for i in s2_rows]
    size = reference_size or reference_size_for(len(s1) + len(s2))
    exclude = {p.key() for p in s1} | {p.key() for p in s2}
    sr, _short = build_reference_set(corpus, bank, e, size, exclude_keys=exclude)
    return ConceptSets(s1=s1, s2=s2, sr=sr)


def concept_sets_from_labels(
    labels: dict[int, str],
    served_rows: list[int],
    e: int,
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    q: int = 2,
    reference_size: int | None = None,
    something_else_to_reference: bool = True,
) -> ConceptSets:
    """Interactive mode: A/B labels become S1/S2, the rest is gathered
    automatically (labels marked SomethingElse join the reference pool).

    Rejects labels for patches outside the served set and concept sets
    smaller than q, with a human-readable reason.
    """
    served = set(served_rows)
    s1, s2, extra_ref = [], [], []
    for row, label in sorted(labels.items()):
        if row not in served:
            raise ValidationError(f"patch {row} was not part of prototype {e}'s served set")
        if label not in VALID_LABELS:
            raise ValidationError(f"unknown label {label!r} for patch {row}")
        if label == LABEL_A:
            s1.append(corpus[row])
        elif label == LABEL_B:
            s2.append(corpus[row])
        elif something_else_to_reference:
            extra_ref.append(corpus[row])
    if len(s1) < q:
        raise ValidationError(f"concept A below minimum size ({len(s1)} < {q})")
    if len(s2) < q:
        raise ValidationError(f"concept B below minimum size ({len(s2)} < {q})")
    size = reference_size or reference_size_for(len(s1) + len(s2))
    exclude = {p.key() for p in s1} | {p.key() for p in s2} | {p.key() for p in extra_ref}
    auto_count = max(0, size - len(extra_ref))
    sr = list(extra_ref)
    if auto_count:
        auto, _short = build_reference_set(corpus, bank, e, auto_count, exclude_keys=exclude)
        sr.extend(auto)
    return ConceptSets(s1=s1, s2=s2, sr=sr)


@dataclass
class SplitRecord:
    prototype_id: int
    new_channel: int
    converged: bool
    steps_used: int
    acc_s1: float
    acc_s2: float
    acc_sr: float
    finetuned: bool

    @classmethod
    def from_parts(cls, result: SplitResult, finetuned: bool) -> "SplitRecord":
        return cls(
            prototype_id=result.prototype_id,
            new_channel=result.new_channel,
            converged=result.converged,
            steps_used=result.steps_used,
            acc_s1=result.accuracies.s1,
            acc_s2=result.accuracies.s2,
            acc_sr=result.accuracies.sr,
            finetuned=finetuned,
        )


def split_and_finetune(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    e: int,
    sets: ConceptSets,
    hyper: SplitHyperparams | None = None,
    seed: int = 0,
    image_classes: dict[str, int] | None = None,
    q: int = 2,
    progress_callback=None,
) -> tuple[PrototypeBank, SplitResult, HeadFinetuneResult | None]:
    """One full split: optimize the kernel pair, then re-init and fine-tune
    the two head rows (skipped when no image has a class label)."""
    session = start_session(bank, e, sets, hyper=hyper, q=q)
    result = run_split(session, rng_seed=[seed, e], progress_callback=progress_callback)
    finetune = None
    new_bank = result.bank
    if image_classes:
        dataset = pooled_dataset(corpus, new_bank, image_classes)
        if dataset:
            finetune = reinit_and_finetune_head(
                new_bank, e, dataset, rng_seed=[seed, e, 1], new_channel=result.new_channel
            )
            new_bank = finetune.bank
    return new_bank, result, finetune


@dataclass
class AutoSplitOutcome:
    bank: PrototypeBank
    records: list[SplitRecord] = field(default_factory=list)

    @property
    def split_channels(self) -> list[int]:
        return [c for r in self.records for c in (r.prototype_id, r.new_channel)]


def auto_split(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    detection: DetectionResult,
    top_n: int,
    hyper: SplitHyperparams | None = None,
    seed: int = 0,
    image_classes: dict[str, int] | None = None,
    q: int = 2,
) -> AutoSplitOutcome:
    """Split the top_n most dissimilar flagged prototypes, highest first."""
    outcome = AutoSplitOutcome(bank=bank)
    for report in detection.flagged()[:top_n]:
        e = report.prototype_id
        sets = concept_sets_from_cliques(detection, e, corpus, outcome.bank)
        new_bank, result, finetune = split_and_finetune(
            corpus, outcome.bank, e, sets,
            hyper=hyper, seed=seed, image_classes=image_classes, q=q,
        )
        outcome.bank = new_bank
        outcome.records.append(SplitRecord.from_parts(result, finetune is not None))
    return outcome
