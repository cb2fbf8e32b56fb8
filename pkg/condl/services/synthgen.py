"""Synthetic image pairs: a random homography plus photometric distortions.

Image B is image A warped by a ground-truth homography, then darkened by
illumination ramps and shadows, brightened by specular highlights, partly covered
by occluders and finally perturbed by pixel noise. Photometric steps operate on
a float ``H×W×3`` canvas in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFilter, ImageOps

from condl.config import DistortionConfig
from condl.schemas import PairMetadata

from .geometry import (
    DegenerateConfigurationError,
    Homography,
    PointSet,
    dlt_homography,
    image_corners,
)

LOGGER = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 16
MAX_HOMOGRAPHY_ATTEMPTS = 100
SOURCE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

Color = Tuple[int, int, int]


class HomographySamplingError(RuntimeError):
    """Every sampled corner perturbation was rejected."""


@dataclass(frozen=True)
class Image:
    """8-bit RGB image, ``H×W×3`` row-major."""

    data: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.data)
        if array.ndim != 3 or array.shape[2] != 3:
            raise ValueError(f"image must be H×W×3, got shape {array.shape}")
        if array.shape[0] < MIN_IMAGE_SIZE or array.shape[1] < MIN_IMAGE_SIZE:
            raise ValueError(f"image must be at least {MIN_IMAGE_SIZE}×{MIN_IMAGE_SIZE}, got {array.shape[1]}×{array.shape[0]}")
        if array.dtype != np.uint8:
            raise ValueError(f"image data must be uint8, got {array.dtype}")
        object.__setattr__(self, "data", np.ascontiguousarray(array))

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, canvas: np.ndarray) -> "Image":
        return cls(np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8))

    def to_chw(self) -> np.ndarray:
        """Network input: ``3×H×W`` float32 in ``[0, 1]``."""

        return (self.data.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()

    def to_pil(self) -> PILImage.Image:
        return PILImage.fromarray(self.data, mode="RGB")

    @classmethod
    def from_pil(cls, image: PILImage.Image) -> "Image":
        return cls(np.asarray(image.convert("RGB"), dtype=np.uint8))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Image) and np.array_equal(self.data, other.data)

    def __hash__(self) -> int:
        return hash(self.data.tobytes())


@dataclass
class SamplePair:
    image_a: Image
    image_b: Image
    h_ab: Homography
    config_digest: str
    seed: int
    pair_id: int = 0
    metadata: Optional[PairMetadata] = field(default=None)

    def __post_init__(self) -> None:
        if self.image_a.data.shape != self.image_b.data.shape:
            raise ValueError(
                f"pair images differ in size: {self.image_a.data.shape} vs {self.image_b.data.shape}"
            )

    @property
    def width(self) -> int:
        return self.image_a.width

    @property
    def height(self) -> int:
        return self.image_a.height


# --- geometric distortion ----------------------------------------------------


def _is_convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        signs.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    signs_arr = np.asarray(signs)
    return bool(np.all(signs_arr > 0) or np.all(signs_arr < 0))


def random_homography(width: int, height: int, max_corner_shift: float, seed: int) -> Homography:
    """Homography moving each image corner by at most ``max_corner_shift·min(W, H)`` px."""

    if not 0 <= max_corner_shift <= 0.4:
        raise ValueError(f"max_corner_shift must lie in [0, 0.4], got {max_corner_shift}")
    if max_corner_shift == 0:
        return Homography.identity()

    rng = np.random.default_rng(seed)
    corners = image_corners(width, height).pts
    bound = max_corner_shift * min(width, height)
    for _ in range(MAX_HOMOGRAPHY_ATTEMPTS):
        moved = corners + rng.uniform(-bound, bound, size=corners.shape)
        if not _is_convex(moved):
            continue
        try:
            h = dlt_homography(PointSet(corners), PointSet(moved))
        except DegenerateConfigurationError:
            continue
        if abs(np.linalg.det(h.m)) < 1e-6:
            continue
        return h
    raise HomographySamplingError(
        f"{MAX_HOMOGRAPHY_ATTEMPTS} consecutive corner perturbations rejected (max_corner_shift={max_corner_shift})"
    )


def _source_coordinates(h: Homography, width: int, height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    inverse = h.inverse().m
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    depth = inverse[2, 0] * xs + inverse[2, 1] * ys + inverse[2, 2]
    finite = np.abs(depth) > 1e-9
    safe = np.where(finite, depth, 1.0)
    px = (inverse[0, 0] * xs + inverse[0, 1] * ys + inverse[0, 2]) / safe
    py = (inverse[1, 0] * xs + inverse[1, 1] * ys + inverse[1, 2]) / safe
    valid = finite & (px >= -0.5) & (px < width - 0.5) & (py >= -0.5) & (py < height - 0.5)
    return px, py, valid


def warp_coverage(h: Homography, width: int, height: int) -> np.ndarray:
    """Destination pixels whose inverse image lies inside the source pixel area."""

    return _source_coordinates(h, width, height)[2]


def perspective_coefficients(h: Homography) -> Tuple[float, ...]:
    """The eight ``Image.transform`` coefficients mapping destination to source pixels.

    Pillow puts pixel centres at half-integer coordinates, so ``h⁻¹`` is
    conjugated by a half-pixel shift.
    """

    to_pillow = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
    from_pillow = np.array([[1.0, 0.0, -0.5], [0.0, 1.0, -0.5], [0.0, 0.0, 1.0]])
    m = to_pillow @ h.inverse().m @ from_pillow
    if abs(m[2, 2]) < 1e-12:
        raise DegenerateConfigurationError("inverse homography sends the pixel origin to infinity")
    return tuple(float(v) for v in (m / m[2, 2]).reshape(-1)[:8])


def warp_image(src: Image, h: Homography, fill_color: Color = (0, 0, 0)) -> Image:
    """Inverse warp with bilinear interpolation; uncovered pixels take ``fill_color``."""

    warped = src.to_pil().transform(
        (src.width, src.height),
        PILImage.Transform.PERSPECTIVE,
        perspective_coefficients(h),
        resample=PILImage.Resampling.BILINEAR,
        fillcolor=tuple(int(c) for c in fill_color),
    )
    return Image.from_pil(warped)


# --- photometric distortions -------------------------------------------------


def add_illumination_gradient(
    canvas: np.ndarray, gain_lo: float, gain_hi: float, direction_seed: int
) -> np.ndarray:
    """Multiply by a linear gain ramp from ``gain_lo`` to ``gain_hi`` along a random direction."""

    if not 0.1 <= gain_lo <= gain_hi <= 3:
        raise ValueError(f"gains must satisfy 0.1 <= lo <= hi <= 3, got ({gain_lo}, {gain_hi})")
    height, width = canvas.shape[:2]
    angle = np.random.default_rng(direction_seed).uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.cos(angle), math.sin(angle)])
    ramp = illumination_ramp(width, height, direction)
    gain = gain_lo + (gain_hi - gain_lo) * ramp
    return np.clip(canvas * gain[..., None], 0.0, 1.0)


def illumination_ramp(width: int, height: int, direction: np.ndarray) -> np.ndarray:
    """Projection of pixel positions on ``direction`` rescaled to ``[0, 1]``."""

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    projection = xs * direction[0] + ys * direction[1]
    corners = image_corners(width, height).pts @ direction
    lo, hi = corners.min(), corners.max()
    if hi - lo < 1e-12:
        return np.zeros_like(projection)
    return (projection - lo) / (hi - lo)


def shadow_polygon(width: int, height: int, seed: int) -> List[Tuple[float, float]]:
    """Vertices (3 to 8) of a random convex polygon: sorted points on an ellipse."""

    rng = np.random.default_rng(seed)
    count = int(rng.integers(3, 9))
    cx = rng.uniform(0, width - 1)
    cy = rng.uniform(0, height - 1)
    short = min(width, height)
    rx, ry = rng.uniform(0.15, 0.45, size=2) * short
    rotation = rng.uniform(0.0, math.pi)
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=count))
    ex = rx * np.cos(angles)
    ey = ry * np.sin(angles)
    xs = cx + ex * math.cos(rotation) - ey * math.sin(rotation)
    ys = cy + ex * math.sin(rotation) + ey * math.cos(rotation)
    return [(float(x), float(y)) for x, y in zip(xs, ys)]


def _feathered_mask(width: int, height: int, polygon: Sequence[Tuple[float, float]]) -> np.ndarray:
    mask = PILImage.new("L", (width, height), 0)
    ImageDraw.Draw(mask).polygon(list(polygon), fill=255)
    # erode then blur: the 2 px soft edge stays inside the polygon
    mask = mask.filter(ImageFilter.MinFilter(5)).filter(ImageFilter.BoxBlur(2))
    return np.asarray(mask, dtype=np.float64) / 255.0


def add_shadow_polygon(canvas: np.ndarray, alpha: float, seed: int) -> np.ndarray:
    if not 0 <= alpha <= 1:
        raise ValueError(f"shadow alpha must lie in [0, 1], got {alpha}")
    height, width = canvas.shape[:2]
    mask = _feathered_mask(width, height, shadow_polygon(width, height, seed))
    return canvas * (1.0 - alpha * mask)[..., None]


def highlight_params(width: int, height: int, seed: int) -> Tuple[int, int, float]:
    rng = np.random.default_rng(seed)
    cx = int(rng.integers(0, width))
    cy = int(rng.integers(0, height))
    sigma = float(rng.uniform(0.02, 0.10) * min(width, height))
    return cx, cy, sigma


def add_specular_highlight(canvas: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """Additive Gaussian blob of peak ``strength`` at a random pixel."""

    if not 0 <= strength <= 1:
        raise ValueError(f"highlight strength must lie in [0, 1], got {strength}")
    height, width = canvas.shape[:2]
    cx, cy, sigma = highlight_params(width, height, seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    blob = strength * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    return np.clip(canvas + blob[..., None], 0.0, 1.0)


def occluder_mask(width: int, height: int, size_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean mask of a random rectangle or ellipse and its RGB colour in ``[0, 1]``."""

    if not 0 < size_fraction <= 0.3:
        raise ValueError(f"occluder size_fraction must lie in (0, 0.3], got {size_fraction}")
    rng = np.random.default_rng(seed)
    area = size_fraction * width * height
    aspect = float(rng.uniform(0.5, 2.0))
    elliptic = bool(rng.integers(0, 2))
    if elliptic:
        box_w = 2.0 * math.sqrt(area * aspect / math.pi)
        box_h = 4.0 * area / (math.pi * box_w)
    else:
        box_w = math.sqrt(area * aspect)
        box_h = area / box_w
    box_w = min(box_w, width)
    box_h = min(box_h, height)
    x0 = float(rng.uniform(0.0, width - box_w))
    y0 = float(rng.uniform(0.0, height - box_h))
    color = rng.uniform(0.0, 1.0, size=3)

    mask = PILImage.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask)
    bbox = (round(x0), round(y0), round(x0 + box_w) - 1, round(y0 + box_h) - 1)
    if elliptic:
        draw.ellipse(bbox, fill=255)
    else:
        draw.rectangle(bbox, fill=255)
    return np.asarray(mask) > 0, color


def add_occluder(canvas: np.ndarray, size_fraction: float, seed: int) -> np.ndarray:
    height, width = canvas.shape[:2]
    mask, color = occluder_mask(width, height, size_fraction, seed)
    out = canvas.copy()
    out[mask] = color
    return out


# --- pairs -------------------------------------------------------------------


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def _draw_count(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def generate_pair(src: Image, cfg: DistortionConfig, pair_id: int = 0) -> SamplePair:
    """Warp ``src`` by a random homography, then apply the photometric chain.

    Every random draw comes from ``cfg.seed`` so the pair is reproducible.
    """

    rng = np.random.default_rng(cfg.seed)
    h = random_homography(src.width, src.height, cfg.max_corner_shift, _draw_seed(rng))
    fill: Color = tuple(int(c) for c in rng.integers(0, 256, size=3))  # type: ignore[assignment]
    canvas = warp_image(src, h, fill).to_float()

    lo, hi = cfg.illumination_gain_range
    gains = np.sort(rng.uniform(lo, hi, size=2))
    canvas = add_illumination_gradient(canvas, float(gains[0]), float(gains[1]), _draw_seed(rng))

    shadows = _draw_count(rng, cfg.n_shadows)
    for _ in range(shadows):
        alpha = float(rng.uniform(*cfg.shadow_alpha_range))
        canvas = add_shadow_polygon(canvas, alpha, _draw_seed(rng))

    highlights = _draw_count(rng, cfg.n_highlights)
    for _ in range(highlights):
        strength = float(rng.uniform(*cfg.highlight_strength))
        canvas = add_specular_highlight(canvas, strength, _draw_seed(rng))

    occluders = _draw_count(rng, cfg.n_occluders)
    for _ in range(occluders):
        size = float(rng.uniform(*cfg.occluder_size_range))
        canvas = add_occluder(canvas, size, _draw_seed(rng))

    if cfg.noise_sigma > 0:
        canvas = np.clip(canvas + rng.normal(0.0, cfg.noise_sigma, size=canvas.shape), 0.0, 1.0)

    digest = cfg.digest()
    metadata = PairMetadata(
        seed=cfg.seed,
        config_digest=digest,
        fill_color=fill,
        shadows=shadows,
        highlights=highlights,
        occluders=occluders,
    )
    return SamplePair(
        image_a=src,
        image_b=Image.from_float(canvas),
        h_ab=h,
        config_digest=digest,
        seed=cfg.seed,
        pair_id=pair_id,
        metadata=metadata,
    )


def procedural_image(size: int, seed: int) -> Image:
    """Texture with a colour gradient, filled shapes and thin stroke clusters."""

    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"procedural images need size >= {MIN_IMAGE_SIZE}")
    rng = np.random.default_rng(seed)
    start, end = rng.uniform(0.0, 1.0, size=(2, 3))
    angle = rng.uniform(0.0, 2.0 * math.pi)
    ramp = illumination_ramp(size, size, np.array([math.cos(angle), math.sin(angle)]))
    base = start + (end - start) * ramp[..., None]
    canvas = Image.from_float(base).to_pil()
    draw = ImageDraw.Draw(canvas)

    def _color() -> Color:
        return tuple(int(c) for c in rng.integers(0, 256, size=3))  # type: ignore[return-value]

    for _ in range(int(rng.integers(8, 17))):
        x0, y0 = rng.uniform(-0.1, 1.0, size=2) * size
        w, h = rng.uniform(0.05, 0.35, size=2) * size
        kind = int(rng.integers(0, 3))
        if kind == 0:
            draw.ellipse((x0, y0, x0 + w, y0 + h), fill=_color())
        elif kind == 1:
            draw.rectangle((x0, y0, x0 + w, y0 + h), fill=_color())
        else:
            points = [(float(px), float(py)) for px, py in rng.uniform(0.0, 1.0, size=(3, 2)) * size]
            draw.polygon(points, fill=_color())

    for _ in range(int(rng.integers(3, 7))):
        x, y = rng.uniform(0.0, 0.85, size=2) * size
        color = _color()
        for _ in range(int(rng.integers(3, 8))):
            dx, dy = rng.uniform(-0.06, 0.06, size=2) * size
            draw.line((x, y, x + dx, y + dy), fill=color, width=int(rng.integers(1, 3)))
            x, y = x + dx * 0.8, y + dy * 0.2 + 2.0

    return Image.from_pil(canvas)


def load_source_images(directory: Path, size: int) -> List[Image]:
    """Load every image under ``directory``, centre-cropped and resized to ``size``."""

    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in SOURCE_SUFFIXES)
    images: List[Image] = []
    for path in paths:
        with PILImage.open(path) as raw:
            fitted = ImageOps.fit(raw.convert("RGB"), (size, size), PILImage.Resampling.BICUBIC)
        images.append(Image.from_pil(fitted))
    LOGGER.info("source_images_loaded", extra={"path": str(directory), "count": len(images)})
    return images


def pair_seed(base_seed: int, index: int) -> int:
    return int(np.random.default_rng([base_seed, index]).integers(0, 2**31 - 1))


def generate_dataset(
    count: int,
    size: int,
    cfg: DistortionConfig,
    seed: int,
    sources: Optional[Sequence[Image]] = None,
) -> Iterator[SamplePair]:
    """Yield ``count`` pairs; procedural sources are used when ``sources`` is empty."""

    for index in range(count):
        derived = pair_seed(seed, index)
        if sources:
            src = sources[index % len(sources)]
        else:
            src = procedural_image(size, derived)
        yield generate_pair(src, cfg.with_seed(derived), pair_id=index)
