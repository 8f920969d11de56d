"""Detection of inconsistent prototype channels.

A prototype is inconsistent when its most-activated patches contain two
disjoint groups of mutually similar features, each of size at least Q.
For every prototype we build a cosine-similarity graph over its patch set,
enumerate maximal cliques (Bron-Kerbosch with pivoting), and look at the
two largest ones.  A sweep over the similarity threshold picks the value
that maximizes the total inter-clique dissimilarity of flagged prototypes;
the resulting cliques double as the automatic concept assignment for
splitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .model import PatchRecord, PrototypeBank, corpus_activations


@dataclass(frozen=True)
class SimilarityGraph:
    """Thresholded cosine-similarity graph over one prototype's patch set.

    Nodes are indices into the patch set; an edge (i, j) is present iff the
    cosine similarity of the two features exceeds ``threshold``.
    """

    nodes: tuple[int, ...]
    edges: frozenset[tuple[int, int]]  # pairs stored with i < j
    threshold: float


@dataclass
class CliqueReport:
    """Per-prototype detection result at one threshold."""

    prototype_id: int
    clique_a: frozenset[int] = frozenset()  # indices into the prototype's patch set
    clique_b: frozenset[int] = frozenset()
    dissimilarity: float = 0.0
    flagged: bool = False
    threshold_used: float = 0.0


@dataclass
class DetectionConfig:
    patch_set_size: int = 10  # matches the size of patch-grid explanations
    max_patch_set_size: int = 50
    dedup_per_image: bool = True
    delta_min: float = 0.05
    delta_max: float = 0.95
    delta_step: float = 0.05
    q: int = 2

    def __post_init__(self):
        if not (1 <= self.patch_set_size <= self.max_patch_set_size):
            raise ValidationError(
                f"patch_set_size must be in [1, {self.max_patch_set_size}], got {self.patch_set_size}"
            )
        if self.q < 1:
            raise ValidationError("q must be >= 1")


class TopPatches(NamedTuple):
    patches: list[PatchRecord]
    short: bool  # fewer than requested were available


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two feature vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairwise_cosine(features: np.ndarray) -> np.ndarray:
    """Dense cosine-similarity matrix, clamped against rounding."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("cosine similarity is undefined for a zero vector")
    unit = features / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def build_similarity_graph(features: np.ndarray, threshold: float) -> SimilarityGraph:
    sims = pairwise_cosine(features)
    n = sims.shape[0]
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if sims[i, j] > threshold:
                edges.add((i, j))
    return SimilarityGraph(tuple(range(n)), frozenset(edges), threshold)


def maximal_cliques(graph: SimilarityGraph) -> list[frozenset[int]]:
    """All maximal cliques, largest first; equal sizes ordered by smallest member.

    Bron-Kerbosch with pivoting.  An isolated node is its own maximal clique,
    so an edgeless graph returns every node as a singleton.
    """
    adj: dict[int, set[int]] = {v: set() for v in graph.nodes}
    for i, j in graph.edges:
        adj[i].add(j)
        adj[j].add(i)

    cliques: list[frozenset[int]] = []

    def expand(r: set[int], p: set[int], x: set[int]) -> None:
        if not p and not x:
            cliques.append(frozenset(r))
            return
        pivot = max(p | x, key=lambda v: len(adj[v] & p))
        for v in sorted(p - adj[pivot]):
            expand(r | {v}, p & adj[v], x & adj[v])
            p.remove(v)
            x.add(v)

    expand(set(), set(graph.nodes), set())
    return sorted(cliques, key=lambda c: (-len(c), tuple(sorted(c))))


def clique_dissimilarity(c1, c2, features: np.ndarray) -> float:
    """1 minus the maximum cross-clique cosine similarity."""
    if not c1 or not c2:
        raise ValidationError("clique_dissimilarity needs two non-empty cliques")
    sims = pairwise_cosine(features)
    best = max(sims[i, j] for i in c1 for j in c2)
    return 1.0 - best


def top_activated_indices(
    activations: np.ndarray,
    corpus: list[PatchRecord],
    d: int,
    k: int,
    dedup_per_image: bool = True,
) -> tuple[list[int], bool]:
    """Corpus indices of the k patches with the highest channel-d activation.

    With dedup enabled at most one patch per image survives, mirroring how
    prototype explanations are cut from distinct images.  Ties keep corpus
    order, so the result is deterministic.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(corpus) == 0:
        raise ValidationError("corpus is empty")
    order = np.argsort(-activations[:, d], kind="stable")
    picked: list[int] = []
    seen_images: set[str] = set()
    for idx in order:
        patch = corpus[int(idx)]
        if dedup_per_image:
            if patch.image_id in seen_images:
                continue
            seen_images.add(patch.image_id)
        picked.append(int(idx))
        if len(picked) == k:
            break
    return picked, len(picked) < k


def top_activated_patches(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    d: int,
    k: int,
    dedup_per_image: bool = True,
) -> TopPatches:
    """The k patches with the highest per-location softmax value on channel d."""
    if not (0 <= d < bank.num_prototypes):
        raise ValidationError(f"prototype id {d} out of range [0, {bank.num_prototypes})")
    acts = corpus_activations(corpus, bank)
    indices, short = top_activated_indices(acts, corpus, d, k, dedup_per_image)
    return TopPatches([corpus[i] for i in indices], short)


def evaluate_prototype(
    patches: list[PatchRecord],
    delta: float,
    q: int,
    prototype_id: int = -1,
) -> CliqueReport:
    """Flag a prototype iff its two largest cliques are disjoint and both >= q."""
    if q < 1:
        raise ValidationError("q must be >= 1")
    report = CliqueReport(prototype_id=prototype_id, threshold_used=delta)
    if len(patches) < 2 * q:
        return report  # cannot host two concepts
    features = np.stack([p.feature for p in patches])
    cliques = maximal_cliques(build_similarity_graph(features, delta))
    if len(cliques) < 2:
        return report
    c1, c2 = cliques[0], cliques[1]
    if len(c1) >= q and len(c2) >= q and not (c1 & c2):
        report.clique_a = c1
        report.clique_b = c2
        report.dissimilarity = clique_dissimilarity(c1, c2, features)
        report.flagged = True
    return report


def score_threshold(
    bank_patches: dict[int, list[PatchRecord]],
    delta: float,
    q: int,
) -> float:
    """Sum of inter-clique dissimilarities over flagged prototypes."""
    return sum(
        r.dissimilarity
        for r in (evaluate_prototype(patches, delta, q, d) for d, patches in bank_patches.items())
        if r.flagged
    )


def threshold_grid(delta_min: float, delta_max: float, delta_step: float) -> list[float]:
    if delta_min >= delta_max or delta_step <= 0:
        raise ValidationError(
            f"bad sweep grid: min={delta_min} max={delta_max} step={delta_step}"
        )
    count = int(np.floor((delta_max - delta_min) / delta_step + 1e-9)) + 1
    return [delta_min + i * delta_step for i in range(count)]


def find_optimal_threshold(
    bank_patches: dict[int, list[PatchRecord]],
    delta_min: float,
    delta_max: float,
    delta_step: float,
    q: int,
) -> tuple[float, list[CliqueReport]]:
    """Sweep the threshold grid, keep the score-maximizing value, rank prototypes.

    Ties in score resolve toward the smallest threshold.  Reports are
    recomputed at the winner and sorted flagged-first by dissimilarity
    descending (prototype id breaks exact ties), so the head of the list is
    the splitting order.
    """
    grid = threshold_grid(delta_min, delta_max, delta_step)
    best_score = 0.0
    delta_star = grid[0]
    for delta in grid:
        score = score_threshold(bank_patches, delta, q)
        if score > best_score:
            best_score = score
            delta_star = delta
    reports = [
        evaluate_prototype(patches, delta_star, q, d) for d, patches in sorted(bank_patches.items())
    ]
    reports.sort(key=lambda r: (not r.flagged, -r.dissimilarity, r.prototype_id))
    return delta_star, reports


@dataclass
class DetectionResult:
    """Outcome of a full detection pass over a bank."""

    delta_star: float
    reports: list[CliqueReport]
    patch_sets: dict[int, list[int]]  # prototype id -> corpus row indices of P_d
    config: DetectionConfig
    mean_dissim_flagged: float = 0.0
    mean_dissim_all: float = 0.0

    def flagged(self) -> list[CliqueReport]:
        return [r for r in self.reports if r.flagged]

    def report_for(self, prototype_id: int) -> CliqueReport:
        for r in self.reports:
            if r.prototype_id == prototype_id:
                return r
        raise ValidationError(f"no report for prototype {prototype_id}")

    def concept_indices(self, prototype_id: int) -> tuple[list[int], list[int]]:
        """Corpus row indices of the two automatically assigned concepts."""
        r = self.report_for(prototype_id)
        if not r.flagged:
            raise ValidationError(f"prototype {prototype_id} is not flagged")
        rows = self.patch_sets[prototype_id]
        return sorted(rows[i] for i in r.clique_a), sorted(rows[i] for i in r.clique_b)


def detect(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    config: DetectionConfig | None = None,
) -> DetectionResult:
    """Run the full heuristic: patch sets, threshold sweep, ranked reports."""
    config = config or DetectionConfig()
    acts = corpus_activations(corpus, bank)
    patch_rows: dict[int, list[int]] = {}
    bank_patches: dict[int, list[PatchRecord]] = {}
    for d in range(bank.num_prototypes):
        rows, _short = top_activated_indices(
            acts, corpus, d, config.patch_set_size, config.dedup_per_image
        )
        patch_rows[d] = rows
        bank_patches[d] = [corpus[i] for i in rows]
    delta_star, reports = find_optimal_threshold(
        bank_patches, config.delta_min, config.delta_max, config.delta_step, config.q
    )
    flagged = [r for r in reports if r.flagged]
    mean_flagged = float(np.mean([r.dissimilarity for r in flagged])) if flagged else 0.0
    mean_all = float(np.mean([r.dissimilarity for r in reports])) if reports else 0.0
    return DetectionResult(
        delta_star=delta_star,
        reports=reports,
        patch_sets=patch_rows,
        config=config,
        mean_dissim_flagged=mean_flagged,
        mean_dissim_all=mean_all,
    )
