"""Train-time augmentation: random horizontal flip and perspective warp.

Both transforms are applied jointly to image and mask. The warp displaces the
four image corners by uniform random offsets of at most
`magnitude * min(H, W)` pixels and maps the resulting quadrilateral onto the
full frame with a projective transform. Images are resampled bilinearly,
masks with nearest neighbor; pixels that fall outside the source are filled
with the Background id (mask) and black (image).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SegmentationSample
from .errors import ConfigError, GenerationError
from .schema import BACKGROUND_ID

_WARP_RETRIES = 10


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_probability: float = 0.5
    warp_magnitude: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if not 0.0 <= self.warp_magnitude <= 0.5:
            raise ConfigError(f"warp_magnitude must be in [0, 0.5], got {self.warp_magnitude}")


def identity_policy(seed: int = 0) -> AugmentationPolicy:
    return AugmentationPolicy(flip_probability=0.0, warp_magnitude=0.0, seed=seed)


@dataclass(frozen=True)
class AppliedTransform:
    """Recorded geometric parameters of one augmentation draw.

    `source_corners` is the (4, 2) array of (x, y) source-quadrilateral
    corners in TL, TR, BR, BL order, or None when no warp is applied.
    Re-applying the same AppliedTransform reproduces the output exactly.
    """

    flipped: bool = False
    source_corners: np.ndarray | None = None


def horizontal_flip(sample: SegmentationSample) -> SegmentationSample:
    """Mirror image and mask about the vertical axis (an exact involution)."""
    return SegmentationSample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, ::-1]),
        source_id=sample.source_id,
    )


def _frame_corners(w: int, h: int) -> np.ndarray:
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def _is_convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        signs.append(cross)
    signs = np.array(signs)
    return bool((signs > 1e-9).all() or (signs < -1e-9).all())


def draw_warp_corners(rng: np.random.Generator, w: int, h: int, magnitude: float) -> np.ndarray:
    """Draw a displaced, non-self-intersecting source quadrilateral."""
    if magnitude == 0.0:
        return _frame_corners(w, h)
    d = magnitude * min(w, h)
    base = _frame_corners(w, h)
    for _ in range(_WARP_RETRIES):
        quad = base + rng.uniform(-d, d, size=(4, 2))
        if _is_convex(quad):
            return quad
    raise GenerationError(f"no valid warp quadrilateral after {_WARP_RETRIES} draws")


def homography_to_quad(corners: np.ndarray, w: int, h: int) -> np.ndarray:
    """3x3 projective matrix mapping frame corners to the given quadrilateral.

    Applying it to an output pixel yields the source location to sample.
    """
    src = _frame_corners(w, h)
    dst = np.asarray(corners, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        b[2 * i] = u
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i + 1] = v
    coeffs = np.linalg.solve(a, b)
    return np.append(coeffs, 1.0).reshape(3, 3)


def _source_coordinates(corners: np.ndarray, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    m = homography_to_quad(corners, w, h)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    denom = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / denom
    sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / denom
    return sx, sy


def warp_with_corners(sample: SegmentationSample, corners: np.ndarray) -> SegmentationSample:
    """Warp image (bilinear) and mask (nearest) by the recorded quadrilateral."""
    h, w = sample.mask.shape
    sx, sy = _source_coordinates(corners, w, h)

    # nearest neighbor for labels: never invents class ids
    nx = np.rint(sx).astype(np.int64)
    ny = np.rint(sy).astype(np.int64)
    valid_n = (nx >= 0) & (nx <= w - 1) & (ny >= 0) & (ny <= h - 1)
    mask_out = np.full((h, w), BACKGROUND_ID, dtype=sample.mask.dtype)
    mask_out[valid_n] = sample.mask[ny[valid_n], nx[valid_n]]

    # bilinear for intensities
    valid_b = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    img = sample.image.astype(np.float64)
    blend = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    image_out = np.zeros_like(sample.image)
    image_out[valid_b] = np.clip(np.rint(blend[valid_b]), 0, 255).astype(sample.image.dtype)
    return SegmentationSample(image=image_out, mask=mask_out, source_id=sample.source_id)


def perspective_warp(sample: SegmentationSample, magnitude: float, seed: int) -> SegmentationSample:
    """Random perspective warp; magnitude 0 returns the input unchanged."""
    if not 0.0 <= magnitude <= 0.5:
        raise ConfigError(f"warp magnitude must be in [0, 0.5], got {magnitude}")
    if magnitude == 0.0:
        return SegmentationSample(sample.image.copy(), sample.mask.copy(), sample.source_id)
    rng = np.random.default_rng(seed)
    h, w = sample.mask.shape
    return warp_with_corners(sample, draw_warp_corners(rng, w, h, magnitude))


def draw_policy_transform(
    policy: AugmentationPolicy, shape: tuple[int, int], draw_seed: int
) -> AppliedTransform:
    """Sample the (flip, warp) parameters for one training example."""
    rng = np.random.default_rng(draw_seed)
    flipped = bool(rng.random() < policy.flip_probability)
    corners = None
    if policy.warp_magnitude > 0.0:
        h, w = shape
        corners = draw_warp_corners(rng, w, h, policy.warp_magnitude)
    return AppliedTransform(flipped=flipped, source_corners=corners)


def apply_transform(sample: SegmentationSample, transform: AppliedTransform) -> SegmentationSample:
    out = sample
    if transform.flipped:
        out = horizontal_flip(out)
    if transform.source_corners is not None:
        out = warp_with_corners(out, transform.source_corners)
    elif out is sample:
        out = SegmentationSample(sample.image.copy(), sample.mask.copy(), sample.source_id)
    return out


def apply_policy(sample: SegmentationSample, policy: AugmentationPolicy, draw_seed: int) -> SegmentationSample:
    """Flip (with probability) then warp, identically on image and mask."""
    transform = draw_policy_transform(policy, sample.mask.shape, draw_seed)
    return apply_transform(sample, transform)
