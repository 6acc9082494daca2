"""Image/mask pair loading, validation, corpus statistics, and splits.

File conventions:
  - images: PNG or JPEG, converted to RGB on load;
  - masks: single-channel 8-bit indexed PNG storing class ids (a palette may
    be embedded for viewing; a sidecar palette.json maps ids to colors);
  - corpus manifest: one `image_path<TAB>mask_path` line per sample, paths
    resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, EmptyCorpusError, FormatError, MaskShapeError, UnknownClassError
from .schema import LabelSchema


@dataclass
class SegmentationSample:
    """An RGB image paired with an equally sized integer class-id mask."""

    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8
    source_id: str = ""


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class pixel fractions over a corpus."""

    fractions: np.ndarray  # (C,) float64, sums to 1 when total_pixels > 0
    total_pixels: int
    pixel_counts: np.ndarray  # (C,) int64


@dataclass(frozen=True)
class Violation:
    sample_id: str
    kind: str  # "mask_shape" | "unknown_class" | "load_failure"
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class CorpusSplit:
    train: list[int]
    validation: list[int]
    seed: int


def _open_image(path: str | Path) -> Image.Image:
    try:
        return Image.open(path)
    except UnidentifiedImageError as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from exc


def _decode_mask(img: Image.Image, schema: LabelSchema, path: str | Path) -> np.ndarray:
    if schema.mask_encoding == "color":
        arr = np.asarray(img.convert("RGB"))
        mask = np.full(arr.shape[:2], 255, dtype=np.uint8)
        for color, cid in schema.color_to_id().items():
            mask[(arr == np.array(color, dtype=np.uint8)).all(axis=-1)] = cid
        if (mask == 255).any() and schema.num_classes <= 255:
            bad = arr[mask == 255][0]
            raise UnknownClassError(f"{path}: color {tuple(int(v) for v in bad)} not in schema")
        return mask
    if img.mode in ("P", "L"):
        arr = np.asarray(img)
    elif img.mode in ("I", "I;16"):
        arr = np.asarray(img).astype(np.int64)
    else:
        raise FormatError(f"{path}: mask must be single-channel indexed, got mode {img.mode}")
    if arr.ndim != 2:
        raise FormatError(f"{path}: mask must be 2-D, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) >= schema.num_classes:
        bad = int(arr[(arr < 0) | (arr >= schema.num_classes)][0])
        raise UnknownClassError(f"{path}: mask value {bad} outside 0..{schema.num_classes - 1}")
    return arr.astype(np.uint8)


def load_sample(image_path: str | Path, mask_path: str | Path, schema: LabelSchema) -> SegmentationSample:
    """Load and validate one image/mask pair.

    Grayscale and RGBA images are converted to RGB. Raises MaskShapeError on
    dimension mismatch, UnknownClassError on out-of-schema ids, FormatError
    on undecodable files.
    """
    image = np.asarray(_open_image(image_path).convert("RGB"))
    mask = _decode_mask(_open_image(mask_path), schema, mask_path)
    if image.shape[:2] != mask.shape:
        raise MaskShapeError(
            f"{image_path}: image is {image.shape[:2]} but mask {mask_path} is {mask.shape}"
        )
    return SegmentationSample(image=image, mask=mask, source_id=str(Path(image_path).stem))


def save_sample(
    sample: SegmentationSample,
    image_path: str | Path,
    mask_path: str | Path,
    schema: LabelSchema,
) -> None:
    """Write the image as RGB PNG and the mask as an indexed PNG of class ids."""
    Image.fromarray(sample.image).save(image_path)
    save_mask(sample.mask, mask_path, schema)


def save_mask(mask: np.ndarray, path: str | Path, schema: LabelSchema) -> None:
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[: schema.num_classes] = schema.palette()
    img.putpalette(palette.ravel().tolist())
    img.save(path)


def write_palette(schema: LabelSchema, path: str | Path) -> None:
    """Write the sidecar palette mapping class ids to names and colors."""
    data = [{"id": c.id, "name": c.name, "color": list(c.color)} for c in schema.classes]
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def validate_sample(sample: SegmentationSample, schema: LabelSchema) -> list[Violation]:
    found = []
    sid = sample.source_id
    if sample.image.shape[:2] != sample.mask.shape:
        found.append(
            Violation(sid, "mask_shape", f"image {sample.image.shape[:2]} vs mask {sample.mask.shape}")
        )
    bad = np.unique(sample.mask[sample.mask >= schema.num_classes])
    for value in bad:
        found.append(Violation(sid, "unknown_class", f"mask contains id {int(value)}"))
    return found


def validate_corpus(corpus: list[SegmentationSample], schema: LabelSchema) -> ValidationReport:
    """Collect per-sample invariant violations; empty report means all valid."""
    report = ValidationReport()
    for sample in corpus:
        report.violations.extend(validate_sample(sample, schema))
    return report


def compute_class_distribution(
    corpus: list[SegmentationSample], schema: LabelSchema
) -> ClassDistribution:
    """Fraction of pixels per class over the whole corpus."""
    if not corpus:
        raise EmptyCorpusError("cannot compute a class distribution over an empty corpus")
    counts = np.zeros(schema.num_classes, dtype=np.int64)
    for sample in corpus:
        mask = np.asarray(sample.mask)
        if mask.max(initial=0) >= schema.num_classes:
            raise UnknownClassError(f"sample {sample.source_id!r} has ids outside the schema")
        counts += np.bincount(mask.ravel(), minlength=schema.num_classes)
    total = int(counts.sum())
    fractions = counts / total if total > 0 else np.zeros_like(counts, dtype=np.float64)
    return ClassDistribution(fractions=fractions, total_pixels=total, pixel_counts=counts)


def distribution_from_fractions(fractions, total_pixels: int = 0) -> ClassDistribution:
    """Build a ClassDistribution from target fractions (e.g., an imbalance profile)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or (fractions < 0).any():
        raise ConfigError("fractions must be a 1-D non-negative vector")
    s = fractions.sum()
    if s <= 0:
        raise ConfigError("fractions must not all be zero")
    fractions = fractions / s
    counts = np.round(fractions * total_pixels).astype(np.int64)
    return ClassDistribution(fractions=fractions, total_pixels=int(total_pixels), pixel_counts=counts)


def split_corpus(corpus: list, validation_fraction: float, seed: int) -> CorpusSplit:
    """Deterministic disjoint train/validation index split covering the corpus."""
    n = len(corpus)
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError(f"validation_fraction must be in (0, 1), got {validation_fraction}")
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(validation_fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    return CorpusSplit(
        train=sorted(int(i) for i in order[n_val:]),
        validation=sorted(int(i) for i in order[:n_val]),
        seed=seed,
    )


def write_manifest(pairs: list[tuple[str | Path, str | Path]], path: str | Path) -> None:
    """One `image<TAB>mask` line per sample, paths made relative to the manifest dir."""
    path = Path(path)
    lines = []
    for image_path, mask_path in pairs:
        image_path, mask_path = Path(image_path), Path(mask_path)
        try:
            image_path = image_path.relative_to(path.parent)
            mask_path = mask_path.relative_to(path.parent)
        except ValueError:
            pass  # keep absolute paths that live outside the manifest dir
        lines.append(f"{image_path}\t{mask_path}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected `image<TAB>mask`, got {line!r}")
        image_path, mask_path = (Path(p) for p in parts)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        pairs.append((image_path, mask_path))
    return pairs


def load_manifest_corpus(path: str | Path, schema: LabelSchema) -> list[SegmentationSample]:
    return [load_sample(img, msk, schema) for img, msk in read_manifest(path)]


def write_distribution_report(
    dist: ClassDistribution, schema: LabelSchema, csv_path: str | Path, json_path: str | Path
) -> None:
    """Emit the distribution as `class,name,pixels,fraction` CSV and as JSON."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "name", "pixels", "fraction"])
        for c in schema.classes:
            writer.writerow([c.id, c.name, int(dist.pixel_counts[c.id]), repr(float(dist.fractions[c.id]))])
    data = {
        "total_pixels": dist.total_pixels,
        "classes": [
            {
                "id": c.id,
                "name": c.name,
                "pixels": int(dist.pixel_counts[c.id]),
                "fraction": float(dist.fractions[c.id]),
            }
            for c in schema.classes
        ],
    }
    Path(json_path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
