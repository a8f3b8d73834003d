"""
Dataset catalog: taxonomy, ingestion of class folders, stratified k-fold
splitting and the procedural 16-class corpus.

A manifest entry is either an image file on disk or a generator record that
renders the image on demand, so the same code paths serve real folders and
the synthetic stand-in corpus.
"""

import json
import logging
import math
from collections import defaultdict
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, Field, model_validator

from errors import DataLeakError, InsufficientDataError, TaxonomyError
from imageops import resize
from models import (
    NUM_CLASSES,
    ClassEntry,
    ClassTaxonomy,
    GenSource,
    Manifest,
    Role,
    Sample,
    SplitAssignment,
)
from motifs import render_sample

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# ============================================================================
# TAXONOMY
# ============================================================================

_DEFAULT_CLASSES: List[Tuple[str, str]] = [
    ("AS.", "Amaranthus spinosus"),
    ("BS.", "Brachypodium sylvaticum"),
    ("CT.", "Canada thistle"),
    ("CA.", "Cirsium arvense"),
    ("CD.", "Cynodon dactylon"),
    ("D.", "Dandelion"),
    ("Flax", "Flax"),
    ("L.", "Lambsquarters"),
    ("Neg.", "Negatives"),
    ("N.", "Nutsedge"),
    ("PM.", "Plantago major"),
    ("SF.", "Setaria faberi"),
    ("SA.", "Sonchus arvensis"),
    ("VM.", "Venus mallow"),
    ("VP.", "Verdolagas purslane"),
    ("OW.", "Other weed"),
]

# Per-class image counts of the field-collected dataset; the untabulated weed gets the quoted
# "about 600 images per class" average.
FIELD_COUNTS: Dict[str, int] = {
    "AS.": 659, "BS.": 655, "CT.": 560, "CA.": 990, "CD.": 631, "D.": 428,
    "Flax": 625, "L.": 549, "Neg.": 1474, "N.": 649, "PM.": 526, "SF.": 566,
    "SA.": 565, "VM.": 704, "VP.": 559, "OW.": 600,
}


def default_taxonomy() -> ClassTaxonomy:
    """The 16-class taxonomy: 14 weeds, flax (crop) and negatives."""
    entries = [ClassEntry(id=i, short=s, full=f) for i, (s, f) in enumerate(_DEFAULT_CLASSES)]
    return ClassTaxonomy(classes=entries, negative_class_id=8, crop_class_id=6)


def save_taxonomy(taxonomy: ClassTaxonomy, path: Path) -> None:
    records = [{"id": c.id, "short": c.short, "full": c.full} for c in taxonomy.classes]
    Path(path).write_text(json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_taxonomy(path: Path) -> ClassTaxonomy:
    """
    Read a taxonomy file (JSON array of {id, short, full} in id order).

    The negative and crop classes are recognised by their folder names
    'neg' and 'flax'.
    """
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        entries = [ClassEntry(**r) for r in records]
        by_dir = {e.dirname: e.id for e in entries}
        return ClassTaxonomy(classes=entries, negative_class_id=by_dir["neg"], crop_class_id=by_dir["flax"])
    except KeyError as e:
        raise TaxonomyError(f"taxonomy lacks required class {e}", class_name=str(e).strip("'")) from e
    except ValueError as e:
        raise TaxonomyError(f"invalid taxonomy file {path}: {e}") from e


def field_counts(taxonomy: Optional[ClassTaxonomy] = None, scale: float = 1.0, minimum: int = 5) -> Dict[int, int]:
    """Per-class counts of the field-collected dataset, optionally scaled down."""
    taxonomy = taxonomy or default_taxonomy()
    return {
        c.id: max(minimum, int(round(FIELD_COUNTS[c.short] * scale)))
        for c in taxonomy.classes
    }


# ============================================================================
# INGESTION
# ============================================================================

def _find_class_dir(root: Path, entry: ClassEntry) -> Optional[Path]:
    for candidate in (entry.dirname, entry.short, entry.short.lower()):
        path = root / candidate
        if path.is_dir():
            return path
    return None


def build_manifest(root: Path, taxonomy: Optional[ClassTaxonomy] = None) -> Manifest:
    """
    Enumerate one folder per class under `root`.

    Args:
        root: directory holding a subdirectory per class ('vm', 'flax', 'neg', ...)
        taxonomy: class list, defaults to the 16-class taxonomy

    Returns:
        Manifest of every decodable image; undecodable files are listed in
        `skipped` and do not abort ingestion.
    """
    taxonomy = taxonomy or default_taxonomy()
    root = Path(root)
    samples: List[Sample] = []
    skipped: List[str] = []

    for entry in taxonomy.classes:
        class_dir = _find_class_dir(root, entry)
        if class_dir is None:
            raise TaxonomyError(f"missing class directory '{entry.dirname}' under {root}", class_name=entry.dirname)
        files = sorted(p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        for path in files:
            image = cv2.imread(str(path), cv2.IMREAD_COLOR)
            if image is None or image.size == 0:
                logger.warning(f"⚠️ Skipping undecodable image {path}")
                skipped.append(str(path))
                continue
            height, width = image.shape[:2]
            samples.append(Sample(path=str(path), class_id=entry.id, width=width, height=height))

    counts = _count(samples, taxonomy)
    logger.info(f"✅ Manifest built from {root}: {len(samples)} samples, {len(skipped)} skipped")
    return Manifest(taxonomy=taxonomy, samples=samples, per_class_counts=counts, skipped=skipped)


def _count(samples: Sequence[Sample], taxonomy: ClassTaxonomy) -> Dict[int, int]:
    counts = {c.id: 0 for c in taxonomy.classes}
    for sample in samples:
        counts[sample.class_id] += 1
    empty = [taxonomy.classes[k].dirname for k, v in counts.items() if v == 0]
    if empty:
        raise TaxonomyError(f"no samples for class '{empty[0]}'", class_name=empty[0])
    return counts


# ============================================================================
# STRATIFIED SPLIT
# ============================================================================

def split_counts(n: int, ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    """Floor train and val shares; the remainder goes to test."""
    n_train = math.floor(Fraction(str(ratios[0])) * n)
    n_val = math.floor(Fraction(str(ratios[1])) * n)
    return n_train, n_val, n - n_train - n_val


def stratified_split(
    manifest: Manifest,
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2),
    k: int = 5,
    seed: int = 0,
    fold: int = 0,
) -> SplitAssignment:
    """
    Per-class seeded permutation, then floor-rule role blocks.

    The test block (tail of the permutation) is fixed for a seed; the val
    window rotates through the remaining pool with `fold`.

    Args:
        ratios: (train, val, test) fractions summing to 1
        k: fold count; every class needs at least k samples
        fold: active rotation of the val window, 0 <= fold < k

    Returns:
        SplitAssignment with one role per manifest sample.

    Raises:
        InsufficientDataError: a class has fewer than k samples
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    if k < 1 or not 0 <= fold < k:
        raise ValueError(f"fold {fold} is not valid for k={k}")
    if seed < 0:
        raise ValueError("split seed must be non-negative")

    by_class: Dict[int, List[int]] = defaultdict(list)
    for i, sample in enumerate(manifest.samples):
        by_class[sample.class_id].append(i)

    roles: List[Optional[Role]] = [None] * len(manifest.samples)
    folds: List[Optional[int]] = [None] * len(manifest.samples)

    for class_id in sorted(by_class):
        members = by_class[class_id]
        n = len(members)
        if n < k:
            raise InsufficientDataError(manifest.taxonomy.name(class_id), n, k)
        perm = np.random.default_rng([seed, class_id]).permutation(n)
        order = [members[j] for j in perm]
        n_train, n_val, _ = split_counts(n, ratios)
        pool = order[: n_train + n_val]
        start = (fold * len(pool)) // k
        val_slots = {(start + j) % len(pool) for j in range(n_val)}
        for j, idx in enumerate(pool):
            roles[idx] = Role.VAL if j in val_slots else Role.TRAIN
            folds[idx] = fold
        for idx in order[n_train + n_val:]:
            roles[idx] = Role.TEST

    return SplitAssignment(fold_count=k, fold=fold, seed=seed, ratios=ratios, roles=roles, folds=folds)


def iter_folds(
    manifest: Manifest,
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2),
    k: int = 5,
    seed: int = 0,
) -> Iterator[SplitAssignment]:
    """All k rotations of the val block over a fixed test set."""
    for fold in range(k):
        yield stratified_split(manifest, ratios, k, seed, fold)


# ============================================================================
# SYNTHETIC CORPUS
# ============================================================================

class VariationRanges(BaseModel):
    """Per-sample random ranges of the procedural corpus."""
    brightness: Tuple[float, float] = (0.7, 1.3)
    shadow: Tuple[float, float] = (0.0, 0.5)
    blur_sigma: Tuple[float, float] = (0.0, 1.2)
    rotation_deg: Tuple[float, float] = (-180.0, 180.0)
    scale: Tuple[float, float] = (0.6, 1.0)
    offset_x: float = Field(0.3, ge=0.0, le=0.5, description="Motif offset range as a fraction of width")
    offset_y: float = Field(0.15, ge=0.0, le=0.5, description="Motif offset range as a fraction of height")
    clutter_prob: float = Field(0.5, ge=0.0, le=1.0)


class CorpusSpec(BaseModel):
    counts: Dict[int, int]
    height: int = Field(224, ge=32)
    width: int = Field(384, ge=32)
    variation: VariationRanges = Field(default_factory=VariationRanges)

    @model_validator(mode="after")
    def check_counts(self) -> "CorpusSpec":
        if sorted(self.counts) != list(range(NUM_CLASSES)):
            raise ValueError("counts must cover every class id 0..15")
        if min(self.counts.values()) <= 0:
            raise ValueError("every class count must be > 0")
        return self

    @classmethod
    def uniform(cls, per_class: int, height: int = 224, width: int = 384, **kw) -> "CorpusSpec":
        return cls(counts={i: per_class for i in range(NUM_CLASSES)}, height=height, width=width, **kw)


def generate_synthetic_corpus(
    spec: CorpusSpec,
    seed: int = 0,
    taxonomy: Optional[ClassTaxonomy] = None,
) -> Manifest:
    """
    Procedural corpus as generator records; images render lazily.

    Every record depends only on (spec, seed, class id, index), so the corpus
    is regenerable bit-identically.
    """
    taxonomy = taxonomy or default_taxonomy()
    var = spec.variation
    samples: List[Sample] = []
    for class_id in range(NUM_CLASSES):
        for i in range(spec.counts[class_id]):
            rng = np.random.default_rng([seed, class_id, i])
            gen = GenSource(
                seed=int(rng.integers(0, 2**31 - 1)),
                class_id=class_id,
                width=spec.width,
                height=spec.height,
                brightness=float(rng.uniform(*var.brightness)),
                shadow=float(rng.uniform(*var.shadow)),
                shadow_angle_deg=float(rng.uniform(0.0, 360.0)),
                blur_sigma=float(rng.uniform(*var.blur_sigma)),
                rotation_deg=float(rng.uniform(*var.rotation_deg)),
                scale=float(rng.uniform(*var.scale)),
                offset_x=float(rng.uniform(-var.offset_x, var.offset_x)),
                offset_y=float(rng.uniform(-var.offset_y, var.offset_y)),
                clutter=bool(rng.random() < var.clutter_prob),
            )
            samples.append(Sample(gen=gen, class_id=class_id, width=spec.width, height=spec.height))
    counts = _count(samples, taxonomy)
    logger.info(f"✅ Synthetic corpus: {len(samples)} samples at {spec.height}x{spec.width}, seed {seed}")
    return Manifest(taxonomy=taxonomy, samples=samples, per_class_counts=counts)


def load_sample_image(sample: Sample, negative_class_id: int = 8) -> np.ndarray:
    """Decode or render a sample as an RGB uint8 raster."""
    if sample.gen is not None:
        image, _ = render_sample(sample.gen, negative_class_id)
        return image
    image = cv2.imread(sample.path, cv2.IMREAD_COLOR)
    if image is None:
        raise OSError(f"cannot decode image {sample.path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


class SampleStore:
    """
    Loads manifest samples resized to the model input, with role guarding.

    A store built with `forbid_test=True` refuses to hand out test-role
    samples; training and validation loaders are built that way.
    """

    def __init__(
        self,
        manifest: Manifest,
        input_hw: Tuple[int, int],
        assignment: Optional[SplitAssignment] = None,
        forbid_test: bool = False,
        cache: bool = True,
    ):
        self.manifest = manifest
        self.input_hw = input_hw
        self.assignment = assignment
        self.forbid_test = forbid_test
        self._cache: Optional[Dict[int, np.ndarray]] = {} if cache else None

    def label(self, index: int) -> int:
        return self.manifest.samples[index].class_id

    def get(self, index: int) -> np.ndarray:
        if self.forbid_test and self.assignment is not None and self.assignment.roles[index] == Role.TEST:
            raise DataLeakError(f"sample {index} has role 'test' and cannot be fetched for training")
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        image = load_sample_image(self.manifest.samples[index], self.manifest.taxonomy.negative_class_id)
        image = resize(image, target_w=self.input_hw[1], target_h=self.input_hw[0])
        if self._cache is not None:
            self._cache[index] = image
        return image


# ============================================================================
# MANIFEST FILES (JSON Lines)
# ============================================================================

def _record(sample: Sample, taxonomy: ClassTaxonomy, role: Optional[Role], fold: Optional[int],
            assignment: Optional[SplitAssignment] = None) -> dict:
    record: dict = {}
    if sample.gen is not None:
        record["gen"] = sample.gen.model_dump()
    else:
        record["path"] = sample.path
        record["width"] = sample.width
        record["height"] = sample.height
    record["class_id"] = sample.class_id
    record["class_name"] = taxonomy.name(sample.class_id)
    record["role"] = role.value if role is not None else None
    record["fold"] = fold
    if assignment is not None:
        record["k"] = assignment.fold_count
        record["split_seed"] = assignment.seed
    return record


def write_manifest_jsonl(path: Path, manifest: Manifest, assignment: Optional[SplitAssignment] = None) -> None:
    """One JSON record per sample, UTF-8, LF line endings."""
    lines = []
    for i, sample in enumerate(manifest.samples):
        role = assignment.roles[i] if assignment else None
        fold = assignment.folds[i] if assignment else None
        lines.append(json.dumps(_record(sample, manifest.taxonomy, role, fold, assignment), ensure_ascii=False))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest_jsonl(
    path: Path,
    taxonomy: Optional[ClassTaxonomy] = None,
    fold_count: int = 5,
    seed: int = 0,
) -> Tuple[Manifest, Optional[SplitAssignment]]:
    """
    Parse a manifest or split file.

    Args:
        fold_count: fold count when the file does not record one
        seed: split seed when the file does not record one

    Returns:
        The manifest, plus the split assignment when every record carries a role.
    """
    taxonomy = taxonomy or default_taxonomy()
    samples: List[Sample] = []
    roles: List[Optional[str]] = []
    folds: List[Optional[int]] = []
    recorded_k: Optional[int] = None
    recorded_seed: Optional[int] = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid JSON ({e})") from e
            if "gen" in rec:
                gen = GenSource(**rec["gen"])
                samples.append(Sample(gen=gen, class_id=rec["class_id"], width=gen.width, height=gen.height))
            else:
                samples.append(Sample(path=rec["path"], class_id=rec["class_id"],
                                      width=rec.get("width", 1), height=rec.get("height", 1)))
            roles.append(rec.get("role"))
            folds.append(rec.get("fold"))
            recorded_k = rec.get("k", recorded_k)
            recorded_seed = rec.get("split_seed", recorded_seed)

    manifest = Manifest(taxonomy=taxonomy, samples=samples, per_class_counts=_count(samples, taxonomy))
    if not roles or any(r is None for r in roles):
        return manifest, None
    active = next((fo for fo in folds if fo is not None), 0)
    assignment = SplitAssignment(
        fold_count=recorded_k if recorded_k is not None else max(fold_count, active + 1),
        fold=active,
        seed=recorded_seed if recorded_seed is not None else seed,
        roles=[Role(r) for r in roles], folds=folds,
    )
    return manifest, assignment
