"""On-disk interchange format for patch bundles and detection reports.

A bundle is a directory::

    bundle/
      manifest.json      schema version, dimensions, counts, per-file CRC32
      features.ppb       float block, one row per patch (N x C)
      kernels.ppb        float block, one row per prototype (D x C)
      head.ppb           float block, class weights (D x K)
      activations.ppb    optional precomputed per-location softmax (N x D)
      patches.jsonl      one metadata record per patch row
      annotations.json   optional ground-truth sidecar (parts, classes, planted info)
      thumbs/            opaque image files, referenced by patch metadata

Float blocks are little-endian float32, row-major, prefixed by the magic
``PPB1``, a u16 block-format version and two u32 dimensions::

    offset  size  field
    0       4     magic "PPB1"
    4       2     u16 block format version (currently 1)
    6       4     u32 rows
    10      4     u32 cols
    14      4*r*c payload, row-major little-endian float32

Writes go to a temporary sibling directory first and are renamed into
place, so a crashed write never leaves a partial bundle at the target
path.  Every file except thumbnails carries a CRC32 in the manifest; reads
reject any mismatch naming the offending file.  Unknown manifest *minor*
versions are readable (extra fields ignored); unknown *major* versions are
rejected.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import CliqueReport, DetectionConfig, DetectionResult
from .errors import BundleError, ValidationError
from .model import PatchRecord, PrototypeBank

SCHEMA_MAJOR = 1
SCHEMA_MINOR = 0
BLOCK_MAGIC = b"PPB1"
BLOCK_VERSION = 1
_BLOCK_HEADER = struct.Struct("<4sHII")


@dataclass
class PatchMeta:
    image_id: str
    h: int
    w: int
    thumbnail_ref: str = ""


@dataclass
class BundleAnnotations:
    """Ground-truth sidecar: per-patch part labels and per-image classes."""

    patch_parts: list[frozenset[str] | None]
    image_classes: dict[str, int] = field(default_factory=dict)
    entangled: dict[int, tuple[str, str]] = field(default_factory=dict)


@dataclass
class PatchBundle:
    features: np.ndarray  # (N, C) float32
    kernels: np.ndarray  # (D, C) float32
    head: np.ndarray  # (D, K) float32
    patches: list[PatchMeta]
    class_names: list[str]
    grid_h: int
    grid_w: int
    thumbnails: dict[str, bytes] = field(default_factory=dict)
    annotations: BundleAnnotations | None = None
    activations: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        self.kernels = np.ascontiguousarray(self.kernels, dtype="<f4")
        self.head = np.ascontiguousarray(self.head, dtype="<f4")
        if self.activations is not None:
            self.activations = np.ascontiguousarray(self.activations, dtype="<f4")
        self.validate()

    def validate(self) -> None:
        n, c = self.features.shape
        d, c2 = self.kernels.shape
        if c != c2:
            raise ValidationError(f"feature width {c} != kernel width {c2}")
        if self.head.shape[0] != d:
            raise ValidationError(f"head rows {self.head.shape[0]} != kernel rows {d}")
        if len(self.patches) != n:
            raise ValidationError(f"{len(self.patches)} patch records for {n} feature rows")
        if len(self.class_names) != self.head.shape[1]:
            raise ValidationError("class_names length != head columns")
        if self.activations is not None and self.activations.shape != (n, d):
            raise ValidationError("activations block has wrong shape")
        if self.annotations is not None and len(self.annotations.patch_parts) != n:
            raise ValidationError("annotation sidecar length != patch count")
        for meta in self.patches:
            if not (0 <= meta.h < self.grid_h and 0 <= meta.w < self.grid_w):
                raise ValidationError(
                    f"patch location ({meta.h},{meta.w}) outside grid {self.grid_h}x{self.grid_w}"
                )

    @property
    def num_patches(self) -> int:
        return self.features.shape[0]

    def to_bank(self) -> PrototypeBank:
        return PrototypeBank(self.kernels.copy(), self.head.copy(), list(self.class_names))

    def to_corpus(self) -> list[PatchRecord]:
        corpus = []
        for row, meta in enumerate(self.patches):
            cache = None
            if self.activations is not None:
                cache = self.activations[row].astype(np.float64)
            corpus.append(
                PatchRecord(
                    feature=self.features[row].astype(np.float64),
                    image_id=meta.image_id,
                    location=(meta.h, meta.w),
                    thumbnail_ref=meta.thumbnail_ref,
                    activation_cache=cache,
                )
            )
        return corpus

    def with_bank(self, bank: PrototypeBank) -> "PatchBundle":
        """New bundle carrying updated kernels/head; activation cache dropped."""
        return PatchBundle(
            features=self.features,
            kernels=np.asarray(bank.kernels),
            head=np.asarray(bank.head),
            patches=list(self.patches),
            class_names=list(bank.class_names),
            grid_h=self.grid_h,
            grid_w=self.grid_w,
            thumbnails=dict(self.thumbnails),
            annotations=self.annotations,
            activations=None,
        )

    def row_of(self) -> dict[tuple[str, tuple[int, int]], int]:
        """(image_id, (h, w)) -> corpus row lookup."""
        return {
            (m.image_id, (m.h, m.w)): row for row, m in enumerate(self.patches)
        }


def _pack_block(array: np.ndarray) -> bytes:
    rows, cols = array.shape
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return _BLOCK_HEADER.pack(BLOCK_MAGIC, BLOCK_VERSION, rows, cols) + payload


def _unpack_block(data: bytes, name: str) -> np.ndarray:
    if len(data) < _BLOCK_HEADER.size:
        raise BundleError(f"block {name} truncated before header")
    magic, version, rows, cols = _BLOCK_HEADER.unpack_from(data)
    if magic != BLOCK_MAGIC:
        raise BundleError(f"block {name} has bad magic {magic!r}")
    if version > BLOCK_VERSION:
        raise BundleError(f"block {name} uses unsupported block version {version}")
    expected = _BLOCK_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise BundleError(f"block {name} payload is {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=_BLOCK_HEADER.size)
    return flat.reshape(rows, cols).copy()


def write_bundle(bundle: PatchBundle, path: str | Path) -> None:
    """Write the directory layout atomically (temp sibling + rename)."""
    bundle.validate()
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp-{uuid.uuid4().hex[:8]}")
    tmp.mkdir(parents=True)
    try:
        crcs: dict[str, int] = {}

        def put(name: str, data: bytes) -> None:
            (tmp / name).write_bytes(data)
            crcs[name] = zlib.crc32(data)

        put("features.ppb", _pack_block(bundle.features))
        put("kernels.ppb", _pack_block(bundle.kernels))
        put("head.ppb", _pack_block(bundle.head))
        if bundle.activations is not None:
            put("activations.ppb", _pack_block(bundle.activations))

        patch_lines = "".join(
            json.dumps(
                {"image_id": m.image_id, "h": m.h, "w": m.w, "thumbnail_ref": m.thumbnail_ref},
                sort_keys=True,
            )
            + "\n"
            for m in bundle.patches
        )
        put("patches.jsonl", patch_lines.encode())

        if bundle.annotations is not None:
            ann = bundle.annotations
            doc = {
                "patch_parts": [
                    sorted(p) if p is not None else None for p in ann.patch_parts
                ],
                "image_classes": ann.image_classes,
                "entangled": {str(k): list(v) for k, v in ann.entangled.items()},
            }
            put("annotations.json", json.dumps(doc, sort_keys=True, indent=1).encode())

        if bundle.thumbnails:
            (tmp / "thumbs").mkdir()
            for ref, blob in sorted(bundle.thumbnails.items()):
                target = tmp / ref
                if not target.resolve().is_relative_to(tmp.resolve()):
                    raise ValidationError(f"thumbnail ref escapes bundle: {ref}")
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(blob)

        manifest = {
            "schema": {"major": SCHEMA_MAJOR, "minor": SCHEMA_MINOR},
            "feature_width": int(bundle.features.shape[1]),
            "num_prototypes": int(bundle.kernels.shape[0]),
            "num_classes": int(bundle.head.shape[1]),
            "num_patches": int(bundle.num_patches),
            "grid": {"h": bundle.grid_h, "w": bundle.grid_w},
            "class_names": bundle.class_names,
            "has_ground_truth": bundle.annotations is not None,
            "has_activations": bundle.activations is not None,
            "num_thumbnails": len(bundle.thumbnails),
            "files": {name: {"crc32": crc} for name, crc in sorted(crcs.items())},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))

        if path.exists():
            graveyard = path.with_name(f"{path.name}.old-{uuid.uuid4().hex[:8]}")
            os.rename(path, graveyard)
            os.rename(tmp, path)
            shutil.rmtree(graveyard)
        else:
            os.rename(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_bundle(path: str | Path) -> PatchBundle:
    """Load and fully validate a bundle directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    schema = manifest.get("schema", {})
    if schema.get("major") != SCHEMA_MAJOR:
        raise BundleError(f"unsupported schema major version {schema.get('major')}")

    def load(name: str, required: bool = True) -> bytes | None:
        file_path = path / name
        if not file_path.exists():
            if required:
                raise BundleError(f"bundle is missing {name}")
            return None
        data = file_path.read_bytes()
        recorded = manifest["files"].get(name, {}).get("crc32")
        if recorded is None:
            raise BundleError(f"manifest has no checksum for {name}")
        if zlib.crc32(data) != recorded:
            raise BundleError(f"checksum mismatch in {name}")
        return data

    features = _unpack_block(load("features.ppb"), "features.ppb")
    kernels = _unpack_block(load("kernels.ppb"), "kernels.ppb")
    head = _unpack_block(load("head.ppb"), "head.ppb")
    activations = None
    if manifest.get("has_activations"):
        activations = _unpack_block(load("activations.ppb"), "activations.ppb")

    if features.shape[0] != manifest["num_patches"]:
        raise BundleError("manifest num_patches does not match features block")
    if kernels.shape[0] != manifest["num_prototypes"]:
        raise BundleError("manifest num_prototypes does not match kernels block")
    if head.shape[1] != manifest["num_classes"]:
        raise BundleError("manifest num_classes does not match head block")
    if features.shape[1] != manifest["feature_width"]:
        raise BundleError("manifest feature_width does not match features block")

    patches = []
    for line in load("patches.jsonl").decode().splitlines():
        rec = json.loads(line)
        patches.append(
            PatchMeta(rec["image_id"], rec["h"], rec["w"], rec.get("thumbnail_ref", ""))
        )

    annotations = None
    if manifest.get("has_ground_truth"):
        doc = json.loads(load("annotations.json").decode())
        annotations = BundleAnnotations(
            patch_parts=[
                frozenset(p) if p is not None else None for p in doc["patch_parts"]
            ],
            image_classes={k: int(v) for k, v in doc.get("image_classes", {}).items()},
            entangled={
                int(k): (v[0], v[1]) for k, v in doc.get("entangled", {}).items()
            },
        )

    thumbnails: dict[str, bytes] = {}
    thumbs_dir = path / "thumbs"
    if thumbs_dir.is_dir():
        for file_path in sorted(thumbs_dir.rglob("*")):
            if file_path.is_file():
                thumbnails[str(file_path.relative_to(path))] = file_path.read_bytes()

    try:
        return PatchBundle(
            features=features,
            kernels=kernels,
            head=head,
            patches=patches,
            class_names=list(manifest["class_names"]),
            grid_h=manifest["grid"]["h"],
            grid_w=manifest["grid"]["w"],
            thumbnails=thumbnails,
            annotations=annotations,
            activations=activations,
        )
    except ValidationError as exc:
        raise BundleError(f"bundle fails validation: {exc}") from exc


REPORT_VERSION = 1


def detection_report_doc(result: DetectionResult) -> dict:
    """Serializable detection report; cliques become corpus row lists."""
    reports = []
    for r in result.reports:
        rows = result.patch_sets.get(r.prototype_id, [])
        reports.append(
            {
                "prototype_id": r.prototype_id,
                "flagged": r.flagged,
                "dissimilarity": r.dissimilarity,
                "threshold_used": r.threshold_used,
                "patch_rows": list(rows),
                "clique_a": sorted(rows[i] for i in r.clique_a),
                "clique_b": sorted(rows[i] for i in r.clique_b),
            }
        )
    cfg = result.config
    return {
        "version": REPORT_VERSION,
        "delta_star": result.delta_star,
        "config": {
            "patch_set_size": cfg.patch_set_size,
            "dedup_per_image": cfg.dedup_per_image,
            "delta_min": cfg.delta_min,
            "delta_max": cfg.delta_max,
            "delta_step": cfg.delta_step,
            "q": cfg.q,
        },
        "mean_dissim_flagged": result.mean_dissim_flagged,
        "mean_dissim_all": result.mean_dissim_all,
        "reports": reports,
    }


def detection_report_from_doc(doc: dict) -> DetectionResult:
    if doc.get("version") != REPORT_VERSION:
        raise BundleError(f"unsupported detection report version {doc.get('version')}")
    cfg = DetectionConfig(
        patch_set_size=doc["config"]["patch_set_size"],
        dedup_per_image=doc["config"]["dedup_per_image"],
        delta_min=doc["config"]["delta_min"],
        delta_max=doc["config"]["delta_max"],
        delta_step=doc["config"]["delta_step"],
        q=doc["config"]["q"],
    )
    reports = []
    patch_sets = {}
    for entry in doc["reports"]:
        rows = list(entry["patch_rows"])
        patch_sets[entry["prototype_id"]] = rows
        index_of = {row: i for i, row in enumerate(rows)}
        reports.append(
            CliqueReport(
                prototype_id=entry["prototype_id"],
                clique_a=frozenset(index_of[r] for r in entry["clique_a"]),
                clique_b=frozenset(index_of[r] for r in entry["clique_b"]),
                dissimilarity=entry["dissimilarity"],
                flagged=entry["flagged"],
                threshold_used=entry["threshold_used"],
            )
        )
    return DetectionResult(
        delta_star=doc["delta_star"],
        reports=reports,
        patch_sets=patch_sets,
        config=cfg,
        mean_dissim_flagged=doc.get("mean_dissim_flagged", 0.0),
        mean_dissim_all=doc.get("mean_dissim_all", 0.0),
    )


def write_detection_report(result: DetectionResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(detection_report_doc(result), sort_keys=True, indent=1))


def read_detection_report(path: str | Path) -> DetectionResult:
    return detection_report_from_doc(json.loads(Path(path).read_text()))
