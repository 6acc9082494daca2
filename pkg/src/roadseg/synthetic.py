"""Procedural road-scene generator with controllable class imbalance.

Scenes are rendered mask-first: the road is a perspective trapezoid of one
surface class over background, features are stamped into the mask, and the
image is then synthesized from the mask with per-class base colors and
textures. Image and labels therefore align exactly by construction, and
class appearance statistics differ enough for a small network to learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ClassDistribution, SegmentationSample
from .errors import ConfigError, GenerationError
from .schema import BACKGROUND_ID, LabelSchema, default_schema

SURFACE_CLASSES = ("Asphalt", "Paved", "Unpaved")
FEATURE_CLASSES = (
    "Markings",
    "Speed-Bump",
    "Cats-Eye",
    "Storm-Drain",
    "Patch",
    "Water-Puddle",
    "Pothole",
    "Cracks",
)

# Stamping order, large features first: when the non-overlap retry budget is
# exhausted, later (smaller) features overwrite earlier ones.
FEATURE_DRAW_ORDER = (
    "Speed-Bump",
    "Patch",
    "Markings",
    "Water-Puddle",
    "Cracks",
    "Pothole",
    "Storm-Drain",
    "Cats-Eye",
)

_PLACEMENT_RETRIES = 100

# name -> (base RGB, noise multiplier)
_TEXTURES = {
    "Asphalt": ((95, 95, 100), 1.0),
    "Paved": ((165, 165, 165), 0.7),
    "Unpaved": ((158, 126, 84), 1.6),
    "Markings": ((235, 235, 235), 0.4),
    "Speed-Bump": ((210, 180, 50), 0.5),
    "Cats-Eye": ((245, 245, 215), 0.3),
    "Storm-Drain": ((50, 55, 62), 0.5),
    "Patch": ((62, 62, 68), 0.9),
    "Water-Puddle": ((105, 125, 165), 0.25),
    "Pothole": ((48, 38, 32), 1.8),
    "Cracks": ((38, 36, 34), 0.6),
}

_SKY_RGB = np.array([150.0, 175.0, 210.0])
_GROUND_RGB = np.array([95.0, 135.0, 85.0])

# Expected stamped pixels per feature instance, as a fraction of min(w, h)^2.
# Used only to budget instance counts when matching an imbalance profile; the
# corpus generator self-corrects against realized counts.
_NOMINAL_AREA = {
    "Speed-Bump": 0.025,
    "Patch": 0.015,
    "Markings": 0.010,
    "Water-Puddle": 0.0085,
    "Cracks": 0.005,
    "Pothole": 0.0047,
    "Storm-Drain": 0.0016,
    "Cats-Eye": 0.0011,
}


@dataclass(frozen=True)
class SceneRecipe:
    """Parameters for one procedural scene; fully determined by `seed`."""

    width: int
    height: int
    surface_class: str = "Asphalt"
    feature_counts: dict[str, int] = field(default_factory=dict)
    noise_level: float = 1.0
    seed: int = 0
    road_area_fraction: float | None = None  # None: drawn from a default range

    def __post_init__(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ConfigError(f"scene size must be at least 32x32, got {self.width}x{self.height}")
        if self.surface_class not in SURFACE_CLASSES:
            raise ConfigError(f"surface_class must be one of {SURFACE_CLASSES}, got {self.surface_class!r}")
        for name, count in self.feature_counts.items():
            if name not in FEATURE_CLASSES:
                raise ConfigError(f"unknown feature class {name!r}")
            if int(count) < 0:
                raise ConfigError(f"negative count for {name}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.road_area_fraction is not None and not 0.05 <= self.road_area_fraction <= 0.6:
            raise ConfigError("road_area_fraction must be in [0.05, 0.6]")


def _dilate(mask: np.ndarray) -> np.ndarray:
    """8-neighborhood binary dilation (no wrap-around)."""
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


def _road_region(rng: np.random.Generator, w: int, h: int, area_fraction: float | None) -> np.ndarray:
    if area_fraction is None:
        area_fraction = rng.uniform(0.28, 0.40)
    y_top = int(round(h * rng.uniform(0.30, 0.42)))
    depth = h - y_top
    mean_w = area_fraction * h / depth  # mean road width as a fraction of image width
    ratio = rng.uniform(2.2, 3.0)  # bottom/top width ratio
    top_w = 2.0 * mean_w / (1.0 + ratio)
    bottom_w = min(ratio * top_w, 0.96)
    top_w = min(max(top_w, 3.0 / w), 0.55)
    cx = (0.5 + rng.uniform(-0.04, 0.04)) * w
    region = np.zeros((h, w), dtype=bool)
    ys = np.arange(y_top, h)
    t = (ys - y_top) / max(depth - 1, 1)
    half = (top_w + (bottom_w - top_w) * t) * w / 2.0
    left = np.clip(np.round(cx - half).astype(int), 0, w - 1)
    right = np.clip(np.round(cx + half).astype(int), 1, w)
    for y, lo, hi in zip(ys, left, right):
        region[y, lo:hi] = True
    return region


def _random_road_pixel(rng: np.random.Generator, road_idx: tuple[np.ndarray, np.ndarray]) -> tuple[int, int]:
    k = int(rng.integers(0, road_idx[0].size))
    return int(road_idx[0][k]), int(road_idx[1][k])


def _ellipse_region(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return ((ys - cy) / max(ry, 0.5)) ** 2 + ((xs - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _feature_candidate(
    name: str, rng: np.random.Generator, road: np.ndarray, road_idx, w: int, h: int
) -> np.ndarray:
    """One randomly parameterized region for the feature; may stick out of the road."""
    s = min(w, h)
    if name == "Pothole":
        cy, cx = _random_road_pixel(rng, road_idx)
        rx = rng.uniform(0.035, 0.055) * s
        ry = rng.uniform(0.6, 0.9) * rx
        return _ellipse_region(h, w, cy, cx, ry, rx)
    if name == "Water-Puddle":
        cy, cx = _random_road_pixel(rng, road_idx)
        rx = rng.uniform(0.06, 0.09) * s
        return _ellipse_region(h, w, cy, cx, 0.45 * rx, rx)
    if name == "Patch":
        cy, cx = _random_road_pixel(rng, road_idx)
        rx = rng.uniform(0.07, 0.10) * s
        ry = rng.uniform(0.5, 0.8) * rx
        return _ellipse_region(h, w, cy, cx, ry, rx)
    if name == "Cats-Eye":
        cy, cx = _random_road_pixel(rng, road_idx)
        r = max(rng.uniform(0.014, 0.022) * s, 1.0)
        return _ellipse_region(h, w, cy, cx, r, r)
    if name == "Storm-Drain":
        cy, cx = _random_road_pixel(rng, road_idx)
        half_w = max(rng.uniform(0.05, 0.07) * s / 2, 1.0)
        half_h = max(rng.uniform(0.02, 0.035) * s / 2, 0.6)
        # drains sit near the road edge: slide the candidate toward one side
        row = road[cy]
        cols = np.flatnonzero(row)
        edge = cols[0] + half_w + 1 if rng.random() < 0.5 else cols[-1] - half_w - 1
        region = np.zeros((h, w), dtype=bool)
        y0, y1 = int(round(cy - half_h)), int(round(cy + half_h))
        x0, x1 = int(round(edge - half_w)), int(round(edge + half_w))
        region[max(y0, 0) : min(y1 + 1, h), max(x0, 0) : min(x1 + 1, w)] = True
        return region
    if name == "Speed-Bump":
        ys = np.flatnonzero(road.any(axis=1))
        band_h = max(int(round(rng.uniform(0.045, 0.07) * h)), 2)
        lo = ys[0] + int(0.25 * ys.size)
        hi = max(ys[-1] - band_h, lo + 1)
        y0 = int(rng.integers(lo, hi))
        region = np.zeros((h, w), dtype=bool)
        region[y0 : y0 + band_h] = True
        return region & road
    if name == "Markings":
        ys = np.flatnonzero(road.any(axis=1))
        y0 = ys[0] + int(rng.uniform(0.05, 0.3) * ys.size)
        y1 = min(y0 + int(rng.uniform(0.35, 0.6) * ys.size), ys[-1])
        offset = rng.uniform(-0.5, 0.5)
        base_w = max(0.018 * s, 1.0)
        region = np.zeros((h, w), dtype=bool)
        for y in range(y0, y1 + 1):
            cols = np.flatnonzero(road[y])
            if cols.size == 0:
                continue
            center = (cols[0] + cols[-1]) / 2 + offset * (cols[-1] - cols[0]) / 2
            t = (y - y0) / max(y1 - y0, 1)
            half = base_w * (0.5 + t)
            region[y, max(int(center - half), 0) : min(int(center + half) + 1, w)] = True
        return region & road
    if name == "Cracks":
        cy, cx = _random_road_pixel(rng, road_idx)
        steps = int(round(rng.uniform(0.15, 0.28) * s))
        angle = rng.uniform(0, 2 * math.pi)
        region = np.zeros((h, w), dtype=bool)
        y, x = float(cy), float(cx)
        for _ in range(steps):
            angle += rng.normal(0.0, 0.5)
            y += 1.2 * math.sin(angle)
            x += 1.2 * math.cos(angle)
            iy, ix = int(round(y)), int(round(x))
            if 0 <= iy < h and 0 <= ix < w:
                region[iy, ix] = True
                if ix + 1 < w:
                    region[iy, ix + 1] = True
        return region & road
    raise ConfigError(f"unknown feature class {name!r}")


_CLIPPED_TO_ROAD = ("Speed-Bump", "Markings", "Cracks")  # built from road geometry


def _place_feature(
    name: str, rng: np.random.Generator, road: np.ndarray, occupied: np.ndarray
) -> np.ndarray:
    road_idx = np.nonzero(road)
    blocked = _dilate(occupied)
    fallback = None
    for _ in range(_PLACEMENT_RETRIES):
        region = _feature_candidate(name, rng, road, road_idx, road.shape[1], road.shape[0])
        if not region.any():
            continue
        if name not in _CLIPPED_TO_ROAD and (region & ~road).any():
            continue  # must fit entirely inside the road
        if fallback is None:
            fallback = region
        if not (region & blocked).any():
            return region
    if fallback is not None:
        return fallback  # overlap allowed after the retry budget; draw order decides labels
    raise GenerationError(f"could not place a {name} inside the road region")


def _render_image(mask: np.ndarray, schema: LabelSchema, rng: np.random.Generator, noise_level: float) -> np.ndarray:
    h, w = mask.shape
    image = np.empty((h, w, 3), dtype=np.float64)
    t = (np.arange(h) / max(h - 1, 1))[:, None, None]
    image[:] = _SKY_RGB * (1 - t) + _GROUND_RGB * t  # background gradient
    noise_scale = np.zeros(schema.num_classes)
    for c in schema.classes:
        if c.name == "Background":
            noise_scale[c.id] = 0.8
            continue
        base, scale = _TEXTURES[c.name]
        image[mask == c.id] = base
        noise_scale[c.id] = scale
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    paved = mask == schema.id_of("Paved")
    image[paved & (((ys % 6) == 0) | ((xs % 6) == 0))] -= 35.0
    bump = mask == schema.id_of("Speed-Bump")
    image[bump & ((xs // 3) % 2 == 1)] = (60.0, 60.0, 60.0)
    drain = mask == schema.id_of("Storm-Drain")
    image[drain & ((ys % 3) == 0)] += 40.0
    image += rng.normal(0.0, 6.0, size=(h, w, 3)) * (noise_level * noise_scale[mask])[..., None]
    return np.clip(image, 0, 255).astype(np.uint8)


def generate_scene(recipe: SceneRecipe, schema: LabelSchema | None = None) -> SegmentationSample:
    """Render one labeled scene; bit-identical for identical recipes."""
    schema = schema or default_schema()
    rng = np.random.default_rng(recipe.seed)
    h, w = recipe.height, recipe.width
    mask = np.full((h, w), BACKGROUND_ID, dtype=np.uint8)
    road = _road_region(rng, w, h, recipe.road_area_fraction)
    mask[road] = schema.id_of(recipe.surface_class)
    occupied = np.zeros((h, w), dtype=bool)
    for name in FEATURE_DRAW_ORDER:
        cid = schema.id_of(name)
        for _ in range(int(recipe.feature_counts.get(name, 0))):
            region = _place_feature(name, rng, road, occupied)
            mask[region] = cid
            occupied |= region
    image = _render_image(mask, schema, rng, recipe.noise_level)
    return SegmentationSample(image=image, mask=mask, source_id=f"scene-{recipe.seed & 0xFFFFFFFF:08x}")


def default_road_profile(schema: LabelSchema | None = None) -> ClassDistribution:
    """Class-pixel ratios measured on the RTK road-surface ground truth."""
    schema = schema or default_schema()
    fractions = {
        "Background": 0.6586,
        "Asphalt": 0.1290,
        "Paved": 0.1050,
        "Unpaved": 0.0922,
        "Markings": 0.0078,
        "Speed-Bump": 0.0006,
        "Cats-Eye": 0.0002,
        "Storm-Drain": 0.0002,
        "Patch": 0.0022,
        "Water-Puddle": 0.0003,
        "Pothole": 0.0006,
        "Cracks": 0.0033,
    }
    vec = np.array([fractions[name] for name in schema.names])
    return ClassDistribution(fractions=vec, total_pixels=0, pixel_counts=np.zeros(len(vec), dtype=np.int64))


def _largest_remainder(n: int, fractions: np.ndarray) -> np.ndarray:
    raw = fractions * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts


def generate_corpus(
    n: int,
    imbalance_profile: ClassDistribution | np.ndarray,
    seed: int,
    *,
    width: int = 64,
    height: int = 64,
    noise_level: float = 1.0,
    schema: LabelSchema | None = None,
) -> list[SegmentationSample]:
    """Generate n scenes whose pooled class distribution follows the profile's
    majority/minority ordering.

    Feature instance counts are budgeted from the profile and corrected
    against the realized pixel counts after every scene, so rankings hold
    even though individual feature sizes are random.
    """
    schema = schema or default_schema()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    fractions = (
        imbalance_profile.fractions
        if isinstance(imbalance_profile, ClassDistribution)
        else np.asarray(imbalance_profile, dtype=np.float64)
    )
    if fractions.shape != (schema.num_classes,):
        raise ConfigError(f"profile must have {schema.num_classes} fractions")
    if (fractions < 0).any() or fractions.sum() <= 0:
        raise GenerationError("profile fractions must be non-negative and not all zero")
    fractions = fractions / fractions.sum()
    target = dict(zip(schema.names, fractions))

    surface_mass = sum(target[name] for name in SURFACE_CLASSES)
    if surface_mass <= 0:
        raise GenerationError("profile is unreachable: no road surface class has mass")
    road_target = 1.0 - target["Background"]
    if road_target > 0.55:
        raise GenerationError(
            f"profile is unreachable: Background target {target['Background']:.3f} is below "
            "the minimum renderable background share (0.45)"
        )
    road_target = min(max(road_target, 0.10), 0.55)

    rng = np.random.default_rng(seed)
    surface_counts = _largest_remainder(
        n, np.array([target[name] / surface_mass for name in SURFACE_CLASSES])
    )
    surfaces = [name for name, k in zip(SURFACE_CLASSES, surface_counts) for _ in range(k)]
    surfaces = [surfaces[i] for i in rng.permutation(n)]
    scene_seeds = rng.integers(0, 2**62, size=n)

    frame = width * height
    s2 = min(width, height) ** 2
    realized = np.zeros(schema.num_classes, dtype=np.int64)
    samples = []
    for i in range(n):
        counts: dict[str, int] = {}
        for name in FEATURE_CLASSES:
            if target[name] <= 0:
                continue
            deficit = target[name] * (i + 1) * frame - realized[schema.id_of(name)]
            counts[name] = int(min(max(round(deficit / (_NOMINAL_AREA[name] * s2)), 0), 8))
        recipe = SceneRecipe(
            width=width,
            height=height,
            surface_class=surfaces[i],
            feature_counts=counts,
            noise_level=noise_level,
            seed=int(scene_seeds[i]),
            road_area_fraction=min(max(road_target * rng.uniform(0.92, 1.08), 0.05), 0.6),
        )
        sample = generate_scene(recipe, schema)
        sample.source_id = f"scene-{i:04d}"
        realized += np.bincount(sample.mask.ravel(), minlength=schema.num_classes)
        samples.append(sample)
    return samples
