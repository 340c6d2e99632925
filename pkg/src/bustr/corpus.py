"""BUS sample containers, radiomics extraction, preprocessing, folds, and corpus persistence."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import EmptyMask, MissingFile, SchemaMismatch, ShapeMismatch, TooFewSamples
from .schema import DatasetConfig, DescriptorKind, DescriptorSet

DEFAULT_SPACING_MM = 0.2


@dataclass
class BusImage:
    """Grayscale ultrasound image with isotropic pixel spacing in mm."""

    pixels: np.ndarray
    spacing_mm_per_px: float = DEFAULT_SPACING_MM

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 16:
            raise ShapeMismatch(f"image must be 2-D with sides >= 16, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ShapeMismatch("image contains non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ShapeMismatch("image intensities must lie in [0, 1]")
        if not self.spacing_mm_per_px > 0:
            raise ShapeMismatch("spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass
class LesionMask:
    """Binary lesion support, same shape as its image."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels).astype(bool)
        if self.pixels.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {self.pixels.ndim} dims")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass(frozen=True)
class RadiomicsFeatures:
    """Fixed features computed over the masked lesion region."""

    area_px: int
    equiv_diameter_mm: float
    bbox_w_mm: float
    bbox_h_mm: float
    mean_intensity: float
    std_intensity: float


def extract_radiomics(image: BusImage, mask: LesionMask) -> RadiomicsFeatures:
    """Deterministic mask statistics: area, equivalent diameter, bbox extent, intensity moments."""
    if image.shape != mask.shape:
        raise ShapeMismatch(f"image {image.shape} vs mask {mask.shape}")
    area = mask.area()
    if area < 1:
        raise EmptyMask("mask has no foreground pixels")
    values = image.pixels[mask.pixels]
    rows, cols = np.nonzero(mask.pixels)
    spacing = image.spacing_mm_per_px
    return RadiomicsFeatures(
        area_px=area,
        equiv_diameter_mm=2.0 * math.sqrt(area / math.pi) * spacing,
        bbox_w_mm=float(cols.max() - cols.min() + 1) * spacing,
        bbox_h_mm=float(rows.max() - rows.min() + 1) * spacing,
        mean_intensity=float(values.mean()),
        std_intensity=float(values.std()),
    )


@dataclass
class BusSample:
    """One image with its descriptors and, when a mask exists, derived radiomics."""

    id: str
    image: BusImage
    descriptors: DescriptorSet
    mask: LesionMask | None = None
    radiomics: RadiomicsFeatures | None = None
    report: str | None = None

    def __post_init__(self) -> None:
        if (self.mask is None) != (self.radiomics is None):
            raise SchemaMismatch(f"sample {self.id}: radiomics must be present iff mask is present")


def pad_and_resize(image: BusImage, target: int) -> BusImage:
    """Zero-pad the short axis symmetrically to square, then bilinear-resize to target x target."""
    if target < 16:
        raise ShapeMismatch(f"target side must be >= 16, got {target}")
    h, w = image.shape
    side = max(h, w)
    padded = np.zeros((side, side), dtype=np.float64)
    top = (side - h) // 2
    left = (side - w) // 2
    padded[top : top + h, left : left + w] = image.pixels
    if side != target:
        t = torch.from_numpy(padded)[None, None]
        t = torch.nn.functional.interpolate(t, size=(target, target), mode="bilinear", align_corners=False)
        padded = t[0, 0].numpy()
    # spacing scales with the resize so physical extent is preserved
    spacing = image.spacing_mm_per_px * side / target
    return BusImage(np.clip(padded, 0.0, 1.0), spacing_mm_per_px=spacing)


@dataclass
class FoldPlan:
    """Disjoint k-fold test assignment plus per-fold train/val splits."""

    k: int
    seed: int
    assignments: dict[str, int]
    train_ids: dict[int, list[str]] = field(default_factory=dict)
    val_ids: dict[int, list[str]] = field(default_factory=dict)

    def test_ids(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.assignments.items() if f == fold)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "assignments": self.assignments,
            "train_ids": {str(f): ids for f, ids in self.train_ids.items()},
            "val_ids": {str(f): ids for f, ids in self.val_ids.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FoldPlan":
        return cls(
            k=int(doc["k"]),
            seed=int(doc["seed"]),
            assignments={str(k): int(v) for k, v in doc["assignments"].items()},
            train_ids={int(f): list(ids) for f, ids in doc["train_ids"].items()},
            val_ids={int(f): list(ids) for f, ids in doc["val_ids"].items()},
        )


def _stratified_deal(groups: dict[str, list[str]], k: int, rng: np.random.Generator) -> dict[str, int]:
    """Deal each label group round-robin across folds, rotating the start fold for balance."""
    assignments: dict[str, int] = {}
    offset = 0
    for label in sorted(groups):
        ids = sorted(groups[label])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            assignments[sid] = (i + offset) % k
        offset += len(ids) % k
    return assignments


def make_folds(ids: list[str], labels: list[str], k: int = 5, seed: int = 0, val_fraction: float = 0.2) -> FoldPlan:
    """Label-stratified k-fold plan; the non-test remainder is split 80/20 train/val per fold."""
    if len(ids) != len(labels):
        raise ShapeMismatch(f"{len(ids)} ids vs {len(labels)} labels")
    if len(ids) < k:
        raise TooFewSamples(f"{len(ids)} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {}
    for sid, label in zip(ids, labels):
        groups.setdefault(str(label), []).append(sid)
    assignments = _stratified_deal(groups, k, rng)

    label_of = {sid: str(label) for sid, label in zip(ids, labels)}
    plan = FoldPlan(k=k, seed=seed, assignments=assignments)
    for fold in range(k):
        rest = sorted(sid for sid in assignments if assignments[sid] != fold)
        by_label: dict[str, list[str]] = {}
        for sid in rest:
            by_label.setdefault(label_of[sid], []).append(sid)
        train: list[str] = []
        val: list[str] = []
        for label in sorted(by_label):
            members = by_label[label]
            rng_fold = np.random.default_rng((seed, fold, hash_str(label)))
            rng_fold.shuffle(members)
            n_val = int(round(len(members) * val_fraction))
            if len(members) > 1:
                n_val = min(max(n_val, 0), len(members) - 1)
            val.extend(members[:n_val])
            train.extend(members[n_val:])
        plan.train_ids[fold] = sorted(train)
        plan.val_ids[fold] = sorted(val)
    return plan


def hash_str(text: str) -> int:
    """Stable 32-bit hash (the builtin hash is salted per process)."""
    return int.from_bytes(hashlib.md5(text.encode("utf-8")).digest()[:4], "little")


def _to_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _from_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def quantize8(pixels: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so PNG round trips are lossless."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def save_corpus(samples: list[BusSample], directory: str | Path, cfg: DatasetConfig | None = None) -> Path:
    """Write images/masks as 8-bit PNG, reports as .txt, and a manifest.jsonl index."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        image_rel = f"images/{sample.id}.png"
        _to_png(sample.image.pixels, directory / image_rel)
        mask_rel = None
        if sample.mask is not None:
            mask_rel = f"masks/{sample.id}.png"
            _to_png(sample.mask.pixels.astype(np.float64), directory / mask_rel)
        if sample.report is not None:
            (directory / "images" / f"{sample.id}.txt").write_text(sample.report, encoding="utf-8")
        lines.append(
            json.dumps(
                {
                    "id": sample.id,
                    "image": image_rel,
                    "mask": mask_rel,
                    "descriptors": sample.descriptors.to_json(),
                    "spacing_mm_per_px": sample.image.spacing_mm_per_px,
                    "has_report": sample.report is not None,
                },
                sort_keys=True,
            )
        )
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if cfg is not None:
        (directory / "dataset.json").write_text(json.dumps(cfg.to_json(), indent=2), encoding="utf-8")
    return directory


def load_corpus(directory: str | Path) -> list[BusSample]:
    """Inverse of save_corpus. Raises MissingFile / SchemaMismatch on broken layouts."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise MissingFile(f"no manifest.jsonl under {directory}")
    samples: list[BusSample] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        image_path = directory / entry["image"]
        if not image_path.exists():
            raise SchemaMismatch(f"manifest references missing image {entry['image']}")
        image = BusImage(_from_png(image_path), spacing_mm_per_px=float(entry["spacing_mm_per_px"]))
        mask = None
        radiomics = None
        if entry.get("mask"):
            mask_path = directory / entry["mask"]
            if not mask_path.exists():
                raise SchemaMismatch(f"manifest references missing mask {entry['mask']}")
            mask = LesionMask(_from_png(mask_path) > 0.5)
            radiomics = extract_radiomics(image, mask)
        report = None
        if entry.get("has_report"):
            report_path = directory / "images" / f"{entry['id']}.txt"
            if not report_path.exists():
                raise SchemaMismatch(f"manifest promises a report for {entry['id']} but none exists")
            report = report_path.read_text(encoding="utf-8")
        samples.append(
            BusSample(
                id=str(entry["id"]),
                image=image,
                descriptors=DescriptorSet.from_json(entry["descriptors"]),
                mask=mask,
                radiomics=radiomics,
                report=report,
            )
        )
    return samples


def load_corpus_config(directory: str | Path) -> DatasetConfig:
    path = Path(directory) / "dataset.json"
    if not path.exists():
        raise MissingFile(f"no dataset.json under {directory}")
    return DatasetConfig.from_json(json.loads(path.read_text(encoding="utf-8")))


def save_fold_plan(plan: FoldPlan, directory: str | Path) -> Path:
    path = Path(directory) / "folds.json"
    path.write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_fold_plan(directory: str | Path) -> FoldPlan:
    path = Path(directory) / "folds.json"
    if not path.exists():
        raise MissingFile(f"no folds.json under {directory}")
    return FoldPlan.from_json(json.loads(path.read_text(encoding="utf-8")))


def manifest_digest(directory: str | Path) -> str:
    """Hex digest over the manifest and all referenced files, for idempotence checks."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise MissingFile(f"no manifest.jsonl under {directory}")
    digest = hashlib.sha256(manifest.read_bytes())
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        for key in ("image", "mask"):
            if entry.get(key):
                digest.update((directory / entry[key]).read_bytes())
        if entry.get("has_report"):
            digest.update((directory / "images" / f"{entry['id']}.txt").read_bytes())
    return digest.hexdigest()


def birads_labels(samples: list[BusSample]) -> list[str]:
    return [str(s.descriptors.get(DescriptorKind.BIRADS, "")) for s in samples]
