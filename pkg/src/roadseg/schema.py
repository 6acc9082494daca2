"""Label schema: ordered class definitions with ids and display colors.

The default schema has 12 road-surface classes. Mask files store class ids
directly in a single 8-bit channel; the schema's colors are only used for
rendering (colorized masks, overlays, report figures).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

# (name, display RGB). Ids follow list order.
_DEFAULT_CLASSES = (
    ("Background", (0, 0, 0)),
    ("Asphalt", (85, 85, 85)),
    ("Paved", (170, 170, 170)),
    ("Unpaved", (139, 90, 43)),
    ("Markings", (255, 255, 255)),
    ("Speed-Bump", (255, 215, 0)),
    ("Cats-Eye", (0, 255, 255)),
    ("Storm-Drain", (0, 0, 255)),
    ("Patch", (128, 0, 128)),
    ("Water-Puddle", (64, 160, 255)),
    ("Pothole", (255, 0, 0)),
    ("Cracks", (0, 255, 0)),
)

BACKGROUND_ID = 0


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class LabelSchema:
    """Ordered set of class definitions.

    mask_encoding selects how mask files map pixels to ids:
      - "index": single-channel files store ids directly (default);
      - "color": RGB files store the class display colors.
    """

    classes: tuple[ClassDef, ...]
    mask_encoding: str = "index"

    def __post_init__(self) -> None:
        ids = [c.id for c in self.classes]
        if ids != list(range(len(self.classes))):
            raise ConfigError(f"class ids must be exactly 0..{len(self.classes) - 1} in order, got {ids}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError("class names must be unique")
        colors = [tuple(c.color) for c in self.classes]
        if len(set(colors)) != len(colors):
            raise ConfigError("class colors must be pairwise distinct")
        if self.mask_encoding not in ("index", "color"):
            raise ConfigError(f"unknown mask_encoding {self.mask_encoding!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def id_of(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise ConfigError(f"unknown class name {name!r}")

    def palette(self) -> np.ndarray:
        """(C, 3) uint8 array of display colors, indexed by class id."""
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def color_to_id(self) -> dict[tuple[int, int, int], int]:
        return {tuple(c.color): c.id for c in self.classes}


def default_schema() -> LabelSchema:
    return LabelSchema(
        classes=tuple(ClassDef(i, name, color) for i, (name, color) in enumerate(_DEFAULT_CLASSES))
    )


def colorize_mask(mask: np.ndarray, schema: LabelSchema) -> np.ndarray:
    """Map an id mask to an (H, W, 3) uint8 image using the schema palette."""
    mask = np.asarray(mask)
    if mask.max(initial=0) >= schema.num_classes:
        raise ConfigError("mask contains ids outside the schema")
    return schema.palette()[mask]


def schema_to_json(schema: LabelSchema, path: str | Path) -> None:
    data = {
        "mask_encoding": schema.mask_encoding,
        "classes": [{"id": c.id, "name": c.name, "color": list(c.color)} for c in schema.classes],
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def schema_from_json(path: str | Path) -> LabelSchema:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from exc
    try:
        classes = tuple(
            ClassDef(int(c["id"]), str(c["name"]), tuple(int(v) for v in c["color"]))
            for c in data["classes"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"schema file {path} has invalid structure: {exc}") from exc
    return LabelSchema(classes=classes, mask_encoding=data.get("mask_encoding", "index"))
