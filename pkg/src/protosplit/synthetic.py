"""Ground-truth workbench: banks and corpora with planted inconsistencies.

Latent "parts" are orthonormal cluster centers in feature space.  Each
entangled prototype points at the normalized mean of two centers and its
most-activated patches come half from each cluster, so its planted pattern
purity is exactly 0.5.  Consistent prototypes align with a single center at
lower gain and carry the classification head.  Classes are pairs of parts;
every image holds two patches of each of its parts.

The noise component along an entangled pair's kernel direction is a
stratified sequence shared by both clusters instead of a free Gaussian
draw.  Activation rank along that direction then interleaves the clusters
deterministically, which pins the planted top-10 at five patches per
concept (a free draw leaves a small tail probability of starving one side).
Noise orthogonal to that direction stays Gaussian.
"""

from __future__ import annotations

import colorsys
import io
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import PatchRecord, PrototypeBank
from .splitting import ConceptSets, build_reference_set


@dataclass
class SynthConfig:
    feature_width: int = 32  # C
    num_prototypes: int = 64  # D
    num_classes: int = 10  # K
    parts: int = 16
    patches_per_part: int = 40
    entangled_count: int = 8
    cluster_spread: float = 0.05
    rng_seed: int = 0
    entangled_gain: float = 10.0
    consistent_gain: float = 3.0
    head_weight: float = 1.0

    def __post_init__(self):
        if self.parts < 2:
            raise ValidationError("need at least 2 parts")
        if self.parts > self.feature_width:
            raise ValidationError("parts cannot exceed feature width (centers are orthonormal)")
        if self.entangled_count > self.num_prototypes:
            raise ValidationError("entangled_count cannot exceed num_prototypes")
        if self.num_prototypes < 2:
            raise ValidationError("need at least 2 prototypes")
        if self.cluster_spread <= 0:
            raise ValidationError("cluster_spread must be positive")


@dataclass
class GroundTruth:
    part_names: list[str]
    part_centers: np.ndarray  # (parts, C) orthonormal rows
    patch_part_index: list[int]  # corpus row -> part index
    image_classes: dict[str, int]
    entangled: dict[int, tuple[str, str]]  # prototype id -> (part A, part B)
    class_parts: list[tuple[int, ...]]  # class -> part indices

    def parts_of_row(self, row: int) -> frozenset[str]:
        return frozenset({self.part_names[self.patch_part_index[row]]})

    def parts_of_patch(self, patch: PatchRecord, row_lookup: dict) -> frozenset[str]:
        return self.parts_of_row(row_lookup[patch.key()])


def _class_layout(cfg: SynthConfig) -> list[tuple[int, ...]]:
    """Classes as pairs of parts with equal patch quotas inside each class.

    The first parts//2 candidate classes pair consecutive parts.  Extra
    classes (when K exceeds that) reuse the leading parts crosswise in
    groups of four, which keeps every part in at most two classes and both
    parts of any class in the same number of classes.  Leftover parts (when
    K is small) join existing classes round-robin as additional parts.
    """
    base = [(2 * i, 2 * i + 1) for i in range(cfg.parts // 2)]
    k = cfg.num_classes
    if k <= len(base):
        classes = [list(p) for p in base[:k]]
        leftover = [p for pair in base[k:] for p in pair]
        if cfg.parts % 2 == 1:
            leftover.append(cfg.parts - 1)
        for i, part in enumerate(leftover):
            classes[i % k].append(part)
        return [tuple(c) for c in classes]
    extra = k - len(base)
    if extra % 2 != 0 or 4 * (extra // 2) > cfg.parts or cfg.parts % 2 == 1:
        raise ValidationError(
            f"cannot lay out {k} classes over {cfg.parts} parts with balanced quotas"
        )
    classes = [list(p) for p in base]
    for group in range(extra // 2):
        a = 4 * group
        classes.append([a, a + 2])
        classes.append([a + 1, a + 3])
    return [tuple(c) for c in classes]


def generate_bank(cfg: SynthConfig) -> tuple[PrototypeBank, list[PatchRecord], GroundTruth]:
    """Deterministic bank + corpus + ground truth for one seed."""
    rng = np.random.default_rng(cfg.rng_seed)
    C, D, parts = cfg.feature_width, cfg.num_prototypes, cfg.parts

    # orthonormal centers via QR of a Gaussian matrix
    gaussian = rng.normal(size=(C, parts))
    q, _ = np.linalg.qr(gaussian)
    centers = q[:, :parts].T.copy()  # (parts, C)
    part_names = [f"part_{i:02d}" for i in range(parts)]

    classes = _class_layout(cfg)
    classes_of_part: dict[int, list[int]] = {p: [] for p in range(parts)}
    for k, members in enumerate(classes):
        for p in members:
            classes_of_part[p].append(k)
    for p in range(parts):
        count = len(classes_of_part[p])
        if count == 0:
            raise ValidationError(f"part {p} belongs to no class")
        if cfg.patches_per_part % (2 * count) != 0:
            raise ValidationError(
                f"patches_per_part={cfg.patches_per_part} not divisible by "
                f"{2 * count} for part {p}"
            )

    # entangled prototypes claim consecutive part pairs; with the default
    # config (parts = 2 * entangled_count) the pairs are disjoint, otherwise
    # they wrap around and share parts
    entangled_ids = sorted(rng.choice(D, size=cfg.entangled_count, replace=False).tolist())
    pair_of: dict[int, tuple[int, int]] = {
        proto: ((2 * m) % parts, (2 * m + 1) % parts)
        for m, proto in enumerate(entangled_ids)
    }
    pair_dirs: dict[int, np.ndarray] = {}
    part_pair_dir: dict[int, np.ndarray] = {}
    for proto, (a, b) in pair_of.items():
        u = centers[a] + centers[b]
        u /= np.linalg.norm(u)
        pair_dirs[proto] = u
        part_pair_dir.setdefault(a, u)
        part_pair_dir.setdefault(b, u)

    kernels = np.zeros((D, C))
    head = np.zeros((D, cfg.num_classes))
    consistent_ids = [d for d in range(D) if d not in pair_of]
    part_of_channel: dict[int, int] = {}
    for i, d in enumerate(consistent_ids):
        p = i % parts
        part_of_channel[d] = p
        kernels[d] = cfg.consistent_gain * centers[p]
        for k in classes_of_part[p]:
            head[d, k] = cfg.head_weight
    for proto in entangled_ids:
        kernels[proto] = cfg.entangled_gain * pair_dirs[proto]

    # every part needs one dominant channel, otherwise its patches have a
    # low softmax floor and inflate every channel's activation there,
    # contaminating top-k sets bank-wide; parts inside an entangled pair are
    # dominated by the pair kernel, the rest get one promoted owner at the
    # same per-part strength
    paired_parts = {p for pair in pair_of.values() for p in pair}
    owner_gain = cfg.entangled_gain / np.sqrt(2.0)
    for p in range(parts):
        if p in paired_parts:
            continue
        owners = [d for d in consistent_ids if part_of_channel[d] == p]
        if not owners:
            raise ValidationError(
                f"part {p} has no channel: need num_prototypes - entangled_count >= parts"
            )
        kernels[owners[0]] = owner_gain * centers[p]

    # patch features: per part, a stratified component along the pair kernel
    # direction (shared by both clusters) plus free Gaussian noise elsewhere
    strata = np.linspace(-1.5, 1.5, cfg.patches_per_part)
    part_features: dict[int, np.ndarray] = {}
    for p in range(parts):
        noise = rng.normal(size=(cfg.patches_per_part, C))
        u = part_pair_dir.get(p)
        if u is not None:
            noise = noise - np.outer(noise @ u, u) + np.outer(strata, u)
        part_features[p] = centers[p] + cfg.cluster_spread * noise

    # images: two patches per class part, consuming each part's quota in order
    corpus: list[PatchRecord] = []
    patch_part_index: list[int] = []
    image_classes: dict[str, int] = {}
    cursor = {p: 0 for p in range(parts)}
    grid_h = max(len(members) for members in classes)
    for k, members in enumerate(classes):
        quota = cfg.patches_per_part // len(classes_of_part[members[0]])
        n_img = quota // 2
        for i in range(n_img):
            image_id = f"img_c{k:02d}_{i:03d}"
            image_classes[image_id] = k
            for slot, p in enumerate(members):
                for col in range(2):
                    row = len(corpus)
                    corpus.append(
                        PatchRecord(
                            feature=part_features[p][cursor[p]],
                            image_id=image_id,
                            location=(slot, col),
                            thumbnail_ref=f"thumbs/p{row:05d}.png",
                        )
                    )
                    patch_part_index.append(p)
                    cursor[p] += 1
    for p in range(parts):
        if cursor[p] != cfg.patches_per_part:
            raise ValidationError(f"part {p} consumed {cursor[p]} of {cfg.patches_per_part} patches")

    bank = PrototypeBank(kernels, head, [f"class_{k}" for k in range(cfg.num_classes)])
    gt = GroundTruth(
        part_names=part_names,
        part_centers=centers,
        patch_part_index=patch_part_index,
        image_classes=image_classes,
        entangled={
            proto: (part_names[a], part_names[b]) for proto, (a, b) in pair_of.items()
        },
        class_parts=classes,
    )
    return bank, corpus, gt


def oracle_labels(
    gt: GroundTruth,
    e: int,
    patches: list[PatchRecord],
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    reference_size: int | None = None,
) -> ConceptSets:
    """Concept sets from ground truth: S1/S2 by true cluster, Sr automatic."""
    if e not in gt.entangled:
        raise ValidationError(f"prototype {e} is not a planted entangled prototype")
    part_a, part_b = gt.entangled[e]
    row_lookup = {p.key(): i for i, p in enumerate(corpus)}
    s1, s2 = [], []
    for patch in patches:
        parts = gt.parts_of_patch(patch, row_lookup)
        if part_a in parts:
            s1.append(patch)
        elif part_b in parts:
            s2.append(patch)
    size = reference_size if reference_size is not None else max(20, len(s1) + len(s2))
    exclude = {p.key() for p in s1} | {p.key() for p in s2}
    sr, _short = build_reference_set(corpus, bank, e, size, exclude_keys=exclude)
    return ConceptSets(s1=s1, s2=s2, sr=sr)


def part_color(part_index: int, parts: int) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((part_index % parts) / parts, 0.75, 0.92)
    return int(r * 255), int(g * 255), int(b * 255)


def render_thumbnails(gt: GroundTruth, corpus: list[PatchRecord], size: int = 16) -> dict[str, bytes]:
    """Tiny solid-color PNGs keyed by thumbnail ref; color encodes the part."""
    from PIL import Image

    parts = len(gt.part_names)
    by_part: dict[int, bytes] = {}
    out: dict[str, bytes] = {}
    for row, patch in enumerate(corpus):
        p = gt.patch_part_index[row]
        if p not in by_part:
            img = Image.new("RGB", (size, size), part_color(p, parts))
            buf = io.BytesIO()
            img.save(buf, format="PNG")
            by_part[p] = buf.getvalue()
        out[patch.thumbnail_ref] = by_part[p]
    return out
