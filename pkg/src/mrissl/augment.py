"""Seeded image augmentation.

Two regimes share one geometric core. The supervised / balancing regime
applies the rotation, shift, zoom, flip and brightness jitter; the SSL
view sampler additionally draws a random resized crop and a Gaussian blur.
All geometry is folded into a single affine map from output pixel to source
pixel, so an image is resampled once, with bilinear interpolation and
edge-replicating ("nearest") fill.

Images are float arrays in ``[0, 1]`` of shape ``(H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from mrissl.dataset import derive_seed


class AugmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_range: float = 20.0
    width_shift_range: float = 0.10
    height_shift_range: float = 0.10
    zoom_range: float = 0.10
    horizontal_flip: bool = True
    brightness_range: tuple[float, float] = (0.8, 1.2)
    fill_mode: str = "nearest"
    # SSL views only
    gaussian_blur: Optional[tuple[float, float]] = None
    blur_probability: float = 0.5
    random_resized_crop: Optional[tuple[float, float]] = None
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise AugmentationConfigError("brightness_range must satisfy 0 < low <= high")
        for name in ("width_shift_range", "height_shift_range", "zoom_range"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise AugmentationConfigError(f"{name} must lie in [0, 1)")
        if not 0 <= self.rotation_range <= 180:
            raise AugmentationConfigError("rotation_range must lie in [0, 180] degrees")
        if self.fill_mode != "nearest":
            raise AugmentationConfigError("only fill_mode='nearest' is supported")
        if not 0 <= self.blur_probability <= 1:
            raise AugmentationConfigError("blur_probability must lie in [0, 1]")
        if self.gaussian_blur is not None:
            s_lo, s_hi = self.gaussian_blur
            if not 0 <= s_lo <= s_hi:
                raise AugmentationConfigError("gaussian_blur sigma range must satisfy 0 <= low <= high")
        if self.random_resized_crop is not None:
            c_lo, c_hi = self.random_resized_crop
            if not 0 < c_lo <= c_hi <= 1:
                raise AugmentationConfigError("random_resized_crop scale must satisfy 0 < low <= high <= 1")
        r_lo, r_hi = self.crop_ratio
        if not 0 < r_lo <= r_hi:
            raise AugmentationConfigError("crop_ratio must satisfy 0 < low <= high")

    @classmethod
    def ssl_default(cls) -> "AugmentationConfig":
        return cls(gaussian_blur=(0.1, 2.0), random_resized_crop=(0.5, 1.0))

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(
            rotation_range=0.0, width_shift_range=0.0, height_shift_range=0.0, zoom_range=0.0,
            horizontal_flip=False, brightness_range=(1.0, 1.0),
        )

    def with_ssl_views(self, crop=(0.5, 1.0), blur=(0.1, 2.0)) -> "AugmentationConfig":
        return replace(self, random_resized_crop=crop, gaussian_blur=blur)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentParams:
    """One draw of every random quantity; logged for range checks."""

    rotation_deg: float = 0.0
    shift_x_frac: float = 0.0
    shift_y_frac: float = 0.0
    zoom: float = 1.0
    flip: bool = False
    brightness: float = 1.0
    # crop box as fractions of the (post-affine) image: top, left, height, width
    crop: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    blur_sigma: float = 0.0


def sample_params(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw augmentation parameters. The draw sequence is fixed for a given cfg."""
    rot = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    sx = rng.uniform(-cfg.width_shift_range, cfg.width_shift_range)
    sy = rng.uniform(-cfg.height_shift_range, cfg.height_shift_range)
    zoom = rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range)
    flip = bool(cfg.horizontal_flip and rng.random() < 0.5)
    brightness = rng.uniform(*cfg.brightness_range)

    crop = (0.0, 0.0, 1.0, 1.0)
    if cfg.random_resized_crop is not None:
        crop = _sample_crop(cfg, rng)
    sigma = 0.0
    if cfg.gaussian_blur is not None and rng.random() < cfg.blur_probability:
        sigma = rng.uniform(*cfg.gaussian_blur)
    return AugmentParams(rot, sx, sy, zoom, flip, brightness, crop, sigma)


def _sample_crop(cfg: AugmentationConfig, rng: np.random.Generator) -> tuple[float, float, float, float]:
    # Fractions of a unit square; aspect ratio drawn log-uniformly, box clipped to fit.
    scale = rng.uniform(*cfg.random_resized_crop)
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    ratio = math.exp(rng.uniform(log_lo, log_hi))
    w = min(1.0, math.sqrt(scale * ratio))
    h = min(1.0, math.sqrt(scale / ratio))
    top = rng.uniform(0.0, 1.0 - h)
    left = rng.uniform(0.0, 1.0 - w)
    return (top, left, h, w)


def _is_identity_geometry(p: AugmentParams, in_shape, out_shape) -> bool:
    return (
        p.rotation_deg == 0 and p.shift_x_frac == 0 and p.shift_y_frac == 0 and p.zoom == 1
        and not p.flip and p.crop == (0.0, 0.0, 1.0, 1.0) and tuple(in_shape) == tuple(out_shape)
    )


def _affine(p: AugmentParams, in_shape, out_shape) -> tuple[np.ndarray, np.ndarray]:
    """Matrix and offset mapping output (row, col) to source (row, col)."""
    H, W = in_shape
    Ho, Wo = out_shape
    top, left, ch, cw = p.crop
    # output pixel centre -> intermediate (post-affine, pre-crop) pixel coords
    s = np.diag([ch * H / Ho, cw * W / Wo])
    t = np.array([top * H + 0.5 * s[0, 0] - 0.5, left * W + 0.5 * s[1, 1] - 0.5])

    # intermediate -> source: undo shift, then zoom/rotation/flip about the centre
    c = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    shift = np.array([p.shift_y_frac * H, p.shift_x_frac * W])
    th = math.radians(p.rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    flip = np.diag([1.0, -1.0 if p.flip else 1.0])
    inv = flip @ rot.T / p.zoom

    matrix = inv @ s
    offset = inv @ (t - c - shift) + c
    return matrix, offset


def apply_params(
    image: np.ndarray, p: AugmentParams, out_shape: Optional[tuple[int, int]] = None
) -> np.ndarray:
    """Apply one parameter draw to a float image in ``[0, 1]``."""
    image = np.asarray(image)
    out_shape = tuple(image.shape) if out_shape is None else tuple(out_shape)
    if _is_identity_geometry(p, image.shape, out_shape):
        out = image
    else:
        matrix, offset = _affine(p, image.shape, out_shape)
        out = ndimage.affine_transform(
            image.astype(np.float64), matrix, offset, output_shape=out_shape, order=1, mode="nearest"
        ).astype(image.dtype, copy=False)
    if p.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, p.blur_sigma, mode="nearest")
    if p.brightness != 1.0:
        out = np.clip(out * p.brightness, 0.0, 1.0).astype(image.dtype, copy=False)
    elif out is image:
        out = image.copy()
    return out


def augment_image(image: np.ndarray, cfg: AugmentationConfig, seed: int) -> np.ndarray:
    """Seeded rotation, shift, zoom, flip and brightness jitter; output has the input's shape."""
    rng = np.random.default_rng(seed)
    return apply_params(image, sample_params(cfg, rng))


def sample_two_views(
    image: np.ndarray,
    cfg: AugmentationConfig,
    seed: int,
    output_size: Optional[tuple[int, int]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations of one image, resized to ``output_size``."""
    views = []
    for v in (0, 1):
        rng = np.random.default_rng(derive_seed("view", seed, v))
        views.append(apply_params(image, sample_params(cfg, rng), output_size))
    return views[0], views[1]


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize using the same resampling path as the augmentations."""
    return apply_params(image, AugmentParams(), size)


def to_unit_float(image: np.ndarray) -> np.ndarray:
    """Scale integer pixels from their bit depth to ``[0, 1]`` float32."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    if image.dtype == np.bool_:
        return image.astype(np.float32)
    if np.issubdtype(image.dtype, np.integer):
        hi = np.iinfo(image.dtype).max
        return image.astype(np.float32) / float(hi)
    return image.astype(np.float32, copy=False)


def normalize_pixels(
    image: np.ndarray,
    mean: tuple[float, ...] = (0.5, 0.5, 0.5),
    std: tuple[float, ...] = (0.5, 0.5, 0.5),
) -> np.ndarray:
    """Convert ``(H, W)`` or ``(H, W, C)`` pixels to a standardized ``(3, H, W)`` array.

    Integer inputs are scaled by their bit depth first; float inputs are
    assumed to already be in ``[0, 1]``. Grayscale is replicated to three
    channels.
    """
    x = to_unit_float(image)
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    elif x.ndim == 3:
        x = np.moveaxis(x, -1, 0)
        if x.shape[0] == 1:
            x = np.repeat(x, 3, axis=0)
        elif x.shape[0] == 4:
            x = x[:3]
    else:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {x.shape}")
    m = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return ((x - m) / s).astype(np.float32)
